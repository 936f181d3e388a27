#include "iclcal/tasks.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <istream>
#include <set>
#include <string>

#include <json.hpp>

#include "iclcal/error.hpp"
#include "iclcal/rng.hpp"

namespace iclcal {
namespace {

using ordered_json = nlohmann::ordered_json;

constexpr std::array<std::pair<TaskKind, std::string_view>, 4> kKindNames{{
    {TaskKind::DuplicationCheck, "duplication_check"},
    {TaskKind::OrderCheck, "order_check"},
    {TaskKind::DeDuplication, "de_duplication"},
    {TaskKind::DictSearch, "dict_search"},
}};

constexpr std::string_view kTrue = "True";
constexpr std::string_view kFalse = "False";

std::vector<std::string> toy_symbols() {
  std::vector<std::string> s = {"<pad>", "<bos>", "\n", " ",     ",",      ":",    "=",     "{",
                                "}",     "[",     "]",  "?",     "Input",  "Output", "True", "False"};
  for (char c : kHashAlphabet) s.emplace_back(1, c);
  for (char c = '0'; c <= '9'; ++c) s.emplace_back(1, c);
  for (int i = 0; s.size() < 64; ++i) s.push_back("<r" + std::to_string(i) + ">");
  return s;
}

std::string random_hash(Rng& rng, std::size_t len) {
  std::string out(len, ' ');
  for (char& c : out) c = kHashAlphabet[rng.below(kHashAlphabet.size())];
  return out;
}

// `count` pairwise-distinct hash strings.
std::vector<std::string> distinct_hashes(Rng& rng, std::size_t count, std::size_t len) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  while (out.size() < count) {
    auto h = random_hash(rng, len);
    if (seen.insert(h).second) out.push_back(std::move(h));
  }
  return out;
}

std::string join(const std::vector<std::string>& items, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

std::size_t list_length(Rng& rng) { return 4 + rng.below(3); }

Demo make_duplication_check(Rng& rng, std::size_t hash_len) {
  const std::size_t n = list_length(rng);
  const bool planted = rng.below(2) == 1;
  auto items = distinct_hashes(rng, planted ? n - 1 : n, hash_len);
  if (planted) {
    const auto src = rng.below(items.size());
    const auto pos = rng.below(items.size() + 1);
    items.insert(items.begin() + static_cast<std::ptrdiff_t>(pos), items[src]);
  }
  return {join(items, " "), std::string(planted ? kTrue : kFalse)};
}

Demo make_order_check(Rng& rng, std::size_t hash_len) {
  auto items = distinct_hashes(rng, list_length(rng), hash_len);
  const bool sorted = rng.below(2) == 1;
  std::sort(items.begin(), items.end());
  if (!sorted) {
    // Fisher-Yates until the order is broken; distinct items make that certain.
    do {
      for (std::size_t i = items.size() - 1; i > 0; --i) {
        std::swap(items[i], items[rng.below(i + 1)]);
      }
    } while (std::is_sorted(items.begin(), items.end()));
  }
  return {join(items, " "), std::string(sorted ? kTrue : kFalse)};
}

Demo make_de_duplication(Rng& rng, std::size_t hash_len) {
  const std::size_t n = list_length(rng);
  const std::size_t dups = 1 + rng.below(2);
  auto items = distinct_hashes(rng, n - dups, hash_len);
  const auto unique = items;
  for (std::size_t k = 0; k < dups; ++k) {
    const auto src = rng.below(unique.size());
    const auto pos = rng.below(items.size() + 1);
    items.insert(items.begin() + static_cast<std::ptrdiff_t>(pos), unique[src]);
  }
  std::vector<std::string> kept;
  std::set<std::string> seen;
  for (const auto& it : items) {
    if (seen.insert(it).second) kept.push_back(it);
  }
  return {join(items, " "), join(kept, " ")};
}

Demo make_dict_search(Rng& rng, std::size_t hash_len) {
  const std::size_t n = 3 + rng.below(3);
  const auto keys = distinct_hashes(rng, n, hash_len);
  std::vector<std::string> pairs;
  std::vector<std::string> values;
  for (const auto& k : keys) {
    values.push_back(random_hash(rng, hash_len));
    pairs.push_back(k + "=" + values.back());
  }
  const auto pick = rng.below(n);
  return {"{" + join(pairs, ", ") + "} " + keys[pick], values[pick]};
}

Demo make_demo(TaskKind kind, Rng& rng, std::size_t hash_len) {
  switch (kind) {
    case TaskKind::DuplicationCheck: return make_duplication_check(rng, hash_len);
    case TaskKind::OrderCheck: return make_order_check(rng, hash_len);
    case TaskKind::DeDuplication: return make_de_duplication(rng, hash_len);
    case TaskKind::DictSearch: return make_dict_search(rng, hash_len);
  }
  throw Error(ErrorCode::InvalidArgument, "unknown task kind");
}

constexpr std::string_view kInputPrefix = "Input: ";
constexpr std::string_view kOutputPrefix = "\nOutput: ";
constexpr std::string_view kDemoSuffix = "\n\n";

bool is_content(std::string_view s, std::string_view extra) {
  return std::all_of(s.begin(), s.end(), [&](char c) {
    return kHashAlphabet.find(c) != std::string_view::npos ||
           extra.find(c) != std::string_view::npos;
  });
}

}  // namespace

std::string_view task_kind_name(TaskKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

TaskKind task_kind_from_name(std::string_view name) {
  for (const auto& [k, n] : kKindNames) {
    if (n == name) return k;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown task kind '" + std::string(name) + "'");
}

void TaskInstance::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::InvalidArgument, what); };
  if (demos.size() < 3) fail("a task needs at least 3 demonstrations");
  if (gold_output.empty()) fail("gold output is empty");
  const bool classification = kind == TaskKind::DuplicationCheck || kind == TaskKind::OrderCheck;
  const std::string_view input_extra = kind == TaskKind::DictSearch ? " {}=," : " ";
  auto check_pair = [&](const std::string& in, const std::string& out) {
    if (in.empty() || !is_content(in, input_extra)) fail("input '" + in + "' has foreign symbols");
    if (classification) {
      if (out != kTrue && out != kFalse) fail("label '" + out + "' is not True/False");
    } else if (out.empty() || !is_content(out, " ")) {
      fail("output '" + out + "' has foreign symbols");
    }
  };
  for (const auto& d : demos) check_pair(d.input, d.output);
  check_pair(query_input, gold_output);
}

const Vocab& Vocab::toy() {
  static const Vocab vocab(toy_symbols());
  return vocab;
}

Vocab::Vocab(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
  for (const auto& s : symbols_) {
    if (s.empty()) throw Error(ErrorCode::InvalidArgument, "empty vocabulary symbol");
    max_symbol_len_ = std::max(max_symbol_len_, s.size());
  }
}

const std::string& Vocab::symbol(TokenId id) const {
  if (id >= symbols_.size()) {
    throw Error(ErrorCode::OutOfVocab, "token id " + std::to_string(id));
  }
  return symbols_[id];
}

std::optional<TokenId> Vocab::find(std::string_view symbol) const {
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    if (symbols_[i] == symbol) return static_cast<TokenId>(i);
  }
  return std::nullopt;
}

TokenId Vocab::id(std::string_view symbol) const {
  if (auto found = find(symbol)) return *found;
  throw Error(ErrorCode::UnmappableSymbol, "no token for '" + std::string(symbol) + "'");
}

std::vector<TokenId> Vocab::tokenize(std::string_view text) const {
  std::vector<TokenId> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    bool matched = false;
    for (std::size_t len = std::min(max_symbol_len_, text.size() - pos); len > 0; --len) {
      if (auto id = find(text.substr(pos, len))) {
        out.push_back(*id);
        pos += len;
        matched = true;
        break;
      }
    }
    if (!matched) {
      throw Error(ErrorCode::UnmappableSymbol,
                  "cannot tokenize '" + std::string(text.substr(pos, 1)) + "'");
    }
  }
  return out;
}

std::string Vocab::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) out += symbol(id);
  return out;
}

TaskInstance gen_task(TaskKind kind, std::size_t n_demos, std::size_t hash_len,
                      std::uint64_t seed) {
  if (n_demos < 3) throw Error(ErrorCode::InvalidArgument, "n_demos must be >= 3");
  if (hash_len < 2) throw Error(ErrorCode::InvalidArgument, "hash_len must be >= 2");
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(kind)));
  TaskInstance task;
  task.kind = kind;
  task.seed = seed;
  for (std::size_t i = 0; i < n_demos; ++i) task.demos.push_back(make_demo(kind, rng, hash_len));
  auto query = make_demo(kind, rng, hash_len);
  task.query_input = std::move(query.input);
  task.gold_output = std::move(query.output);
  return task;
}

std::string render_text(const TaskInstance& instance) {
  std::string text;
  for (const auto& d : instance.demos) {
    text.append(kInputPrefix).append(d.input).append(kOutputPrefix).append(d.output);
    text.append(kDemoSuffix);
  }
  text.append(kInputPrefix).append(instance.query_input).append(kOutputPrefix);
  return text;
}

TokenizedPrompt render_prompt(const TaskInstance& instance, const Vocab& vocab) {
  TokenizedPrompt prompt;
  prompt.token_ids.push_back(vocab.bos());
  auto append = [&](std::string_view piece) {
    auto ids = vocab.tokenize(piece);
    prompt.token_ids.insert(prompt.token_ids.end(), ids.begin(), ids.end());
  };
  for (const auto& d : instance.demos) {
    append(kInputPrefix);
    append(d.input);
    append(kOutputPrefix);
    const std::size_t start = prompt.token_ids.size();
    append(d.output);
    std::vector<std::size_t> span;
    for (std::size_t t = start; t < prompt.token_ids.size(); ++t) span.push_back(t);
    std::span<const TokenId> span_ids(prompt.token_ids.data() + start, span.size());
    if (span.empty() || vocab.detokenize(span_ids) != d.output) {
      throw Error(ErrorCode::UnmappableSymbol,
                  "output '" + d.output + "' does not tokenize to a clean span");
    }
    prompt.demo_output_spans.push_back(std::move(span));
    append(kDemoSuffix);
  }
  prompt.query_start = prompt.token_ids.size();
  append(kInputPrefix);
  append(instance.query_input);
  append(kOutputPrefix);
  prompt.validate();
  return prompt;
}

std::string decode_answer(std::span<const TokenId> generated, const Vocab& vocab) {
  const TokenId nl = vocab.newline();
  auto end = std::find(generated.begin(), generated.end(), nl);
  return vocab.detokenize(std::span<const TokenId>(generated.begin(), end));
}

std::string task_to_json_line(const TaskInstance& instance) {
  ordered_json j;
  j["kind"] = task_kind_name(instance.kind);
  j["seed"] = instance.seed;
  j["demos"] = ordered_json::array();
  for (const auto& d : instance.demos) {
    j["demos"].push_back(ordered_json{{"input", d.input}, {"output", d.output}});
  }
  j["query_input"] = instance.query_input;
  j["gold_output"] = instance.gold_output;
  return j.dump();
}

TaskInstance task_from_json_line(std::string_view line) {
  TaskInstance task;
  try {
    const auto j = nlohmann::json::parse(line);
    static const std::set<std::string> allowed = {"kind", "seed", "demos", "query_input",
                                                  "gold_output"};
    for (const auto& [key, _] : j.items()) {
      if (!allowed.count(key)) throw Error(ErrorCode::InvalidArgument, "unknown task field " + key);
    }
    task.kind = task_kind_from_name(j.at("kind").get<std::string>());
    task.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& d : j.at("demos")) {
      task.demos.push_back({d.at("input").get<std::string>(), d.at("output").get<std::string>()});
    }
    task.query_input = j.at("query_input").get<std::string>();
    task.gold_output = j.at("gold_output").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("malformed task record: ") + e.what());
  }
  task.validate();
  return task;
}

std::vector<TaskInstance> read_tasks(std::istream& in) {
  std::vector<TaskInstance> tasks;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      tasks.push_back(task_from_json_line(line));
    } catch (const Error& e) {
      throw Error(e.code(), "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return tasks;
}

ToyCausalMeanModel make_task_toy_model(const Vocab& vocab, std::size_t embed_dim,
                                       std::uint64_t seed) {
  auto model = ToyCausalMeanModel::random(vocab.size(), embed_dim, seed);
  auto& bias = model.mutable_out_bias();
  bias[vocab.id(kTrue)] = 3.0;
  bias[vocab.id(kFalse)] = 3.0;
  for (char c : kHashAlphabet) bias[vocab.id(std::string(1, c))] = 1.5;
  bias[vocab.newline()] = 1.0;
  return model;
}

void underpredict_first_demo(ToyCausalMeanModel& model, const TokenizedPrompt& prompt,
                             double margin) {
  prompt.validate();
  const auto& span = prompt.demo_output_spans.front();
  const std::size_t t = *std::min_element(span.begin(), span.end());
  if (t == 0) throw Error(ErrorCode::PositionOutOfRange, "span starts at position 0");
  const auto x = model.embed(prompt.token_ids);
  std::vector<double> hidden(model.embed_dim(), 0.0);
  for (std::size_t s = 0; s < t; ++s) {
    for (std::size_t j = 0; j < hidden.size(); ++j) hidden[j] += x(s, j);
  }
  double sq = 0.0;
  for (double& h : hidden) {
    h /= static_cast<double>(t);
    sq += h * h;
  }
  if (sq == 0.0) return;
  auto w = model.mutable_out_weight().row(prompt.token_ids[t]);
  for (std::size_t j = 0; j < w.size(); ++j) w[j] -= margin * hidden[j] / sq;
}

}  // namespace iclcal
