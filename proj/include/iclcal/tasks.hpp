#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "iclcal/model.hpp"
#include "iclcal/prompt.hpp"

namespace iclcal {

enum class TaskKind { DuplicationCheck, OrderCheck, DeDuplication, DictSearch };

std::string_view task_kind_name(TaskKind kind);
/// Throws InvalidArgument for unknown names.
TaskKind task_kind_from_name(std::string_view name);

struct Demo {
  std::string input;
  std::string output;
  friend bool operator==(const Demo&, const Demo&) = default;
};

struct TaskInstance {
  TaskKind kind = TaskKind::DuplicationCheck;
  std::vector<Demo> demos;
  std::string query_input;
  std::string gold_output;
  std::uint64_t seed = 0;

  /// Throws InvalidArgument: fewer than 3 demos, empty gold, or content
  /// outside the hash alphabet and the task's structural symbols.
  void validate() const;

  friend bool operator==(const TaskInstance&, const TaskInstance&) = default;
};

/// Lowercase 'a'..'p'.
inline constexpr std::string_view kHashAlphabet = "abcdefghijklmnop";

/// Fixed 64-symbol vocabulary: specials, separators, the 16 hash characters,
/// digits and single-token "True"/"False" labels. Text is tokenized by
/// greedy longest match.
class Vocab {
 public:
  static const Vocab& toy();

  explicit Vocab(std::vector<std::string> symbols);

  std::size_t size() const noexcept { return symbols_.size(); }
  const std::string& symbol(TokenId id) const;
  std::optional<TokenId> find(std::string_view symbol) const;
  /// Throws UnmappableSymbol.
  TokenId id(std::string_view symbol) const;

  /// Throws UnmappableSymbol if some character sequence has no token.
  std::vector<TokenId> tokenize(std::string_view text) const;
  std::string detokenize(std::span<const TokenId> ids) const;

  TokenId bos() const { return id("<bos>"); }
  TokenId newline() const { return id("\n"); }

 private:
  std::vector<std::string> symbols_;
  std::size_t max_symbol_len_ = 1;
};

/// Deterministic synthetic task; gold labels follow by construction.
/// Throws InvalidArgument for n_demos < 3 or hash_len < 2.
TaskInstance gen_task(TaskKind kind, std::size_t n_demos, std::size_t hash_len,
                      std::uint64_t seed);

/// Prompt text (without <bos>) exactly as it is tokenized.
std::string render_text(const TaskInstance& instance);

/// Tokenized prompt with one span per demo output and query_start at the
/// first query token. Throws UnmappableSymbol.
TokenizedPrompt render_prompt(const TaskInstance& instance, const Vocab& vocab);

/// Generated text up to the first newline token.
std::string decode_answer(std::span<const TokenId> generated, const Vocab& vocab);

/// Line-delimited task records: {kind, seed, demos, query_input, gold_output}.
std::string task_to_json_line(const TaskInstance& instance);
/// Throws InvalidArgument on malformed or invalid records.
TaskInstance task_from_json_line(std::string_view line);
std::vector<TaskInstance> read_tasks(std::istream& in);

/// Toy model over the task vocabulary with the label and hash-character
/// logits raised, so demonstration outputs start out plausible.
ToyCausalMeanModel make_task_toy_model(const Vocab& vocab, std::size_t embed_dim,
                                       std::uint64_t seed);

/// Lowers the logit of the first demonstration's first output token by
/// `margin` at its scored position, by pushing that token's output row
/// against the prefix mean there.
void underpredict_first_demo(ToyCausalMeanModel& model, const TokenizedPrompt& prompt,
                             double margin);

}  // namespace iclcal
