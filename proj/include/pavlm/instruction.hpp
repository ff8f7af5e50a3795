#pragma once

// Instruction text: seed question/answer templates, augmentation prompts,
// offline paraphrasing, the hashed bag-of-words text encoder, and the mask-label
// classifier + query projection that condition the decoder.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <regex>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "pavlm/autodiff.hpp"
#include "pavlm/layers.hpp"
#include "pavlm/params.hpp"
#include "pavlm/rng.hpp"

namespace pavlm {

inline constexpr std::string_view kMaskToken = "<mask token>";
inline constexpr std::string_view kMaskLabel = "<mask label>";
inline constexpr int kNumAffordanceLabels = 18;

struct AffordanceLabel {
  int id = 0;
  std::string name;
  bool operator==(const AffordanceLabel&) const = default;
};

// The 18 affordance names; id = position. Loaded from a dataset manifest.
class LabelVocabulary {
 public:
  LabelVocabulary() = default;
  explicit LabelVocabulary(std::vector<std::string> names) : names_(std::move(names)) {
    if (static_cast<int>(names_.size()) != kNumAffordanceLabels)
      throw InvalidArgument("label vocabulary must have exactly 18 names, got " + std::to_string(names_.size()));
    std::set<std::string> seen;
    for (const auto& n : names_) {
      if (n.empty()) throw InvalidArgument("label vocabulary contains an empty name");
      if (!seen.insert(n).second) throw InvalidArgument("label vocabulary has duplicate name: " + n);
    }
  }

  const std::vector<std::string>& names() const { return names_; }
  int size() const { return static_cast<int>(names_.size()); }

  bool contains(const std::string& name) const { return std::find(names_.begin(), names_.end(), name) != names_.end(); }

  AffordanceLabel label(const std::string& name) const {
    auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) throw InvalidArgument("unknown affordance label: " + name);
    return {static_cast<int>(it - names_.begin()), name};
  }

  AffordanceLabel label(int id) const {
    if (id < 0 || id >= size()) throw InvalidArgument("affordance id out of range: " + std::to_string(id));
    return {id, names_[static_cast<std::size_t>(id)]};
  }

 private:
  std::vector<std::string> names_;
};

struct InstructionRecord {
  std::string instruct_text;
  std::string object_name;
  std::string affordance;
  std::string answer_text;
  std::string source = "seed";  // seed | rule | service
};

inline std::size_t count_occurrences(std::string_view text, std::string_view needle) {
  if (needle.empty()) return 0;
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string_view::npos; pos = text.find(needle, pos + needle.size())) ++n;
  return n;
}

inline std::string replace_all(std::string text, std::string_view from, std::string_view to) {
  if (from.empty()) return text;
  for (auto pos = text.find(from); pos != std::string::npos; pos = text.find(from, pos + to.size()))
    text.replace(pos, from.size(), to);
  return text;
}

inline std::string seed_question(std::string_view object_name, std::string_view action) {
  return "What part of the " + std::string(object_name) + " should we interact with to " + std::string(action) +
         " it?";
}

inline std::string seed_answer(std::string_view action) {
  return "You can " + std::string(action) + " the area " + std::string(kMaskToken);
}

inline InstructionRecord render_seed_qa(const std::string& object_name, const std::string& affordance) {
  if (object_name.empty()) throw InvalidArgument("render_seed_qa: empty object name");
  if (affordance.empty()) throw InvalidArgument("render_seed_qa: empty affordance name");
  return {seed_question(object_name, affordance), object_name, affordance, seed_answer(affordance), "seed"};
}

// Prompt for a text-generation model asking for paraphrased QA pairs. The
// <mask label> placeholder is filled with the affordance name; the literal
// <mask token> is kept for the model to reproduce.
inline std::string build_augmentation_prompt(const std::string& object_name, const std::string& affordance,
                                             int n_variants) {
  if (n_variants < 1) throw InvalidArgument("build_augmentation_prompt: n_variants must be >= 1");
  if (object_name.empty() || affordance.empty()) throw InvalidArgument("build_augmentation_prompt: empty name");
  static const std::string kTemplate =
      "You are an expert in robotic manipulation and the affordances of 3D objects.\n"
      "Seed question: \"{question}\"\n"
      "Seed answer: \"{answer}\"\n"
      "The affordance category is <mask label>.\n"
      "Write {n} new question-answer pairs that ask the same thing about the {object} in different words. "
      "Describe the 3D shape and physical properties of the {object} that matter for the <mask label> affordance: "
      "its parts, their size and orientation, and where a hand or gripper would make contact.\n"
      "Rules:\n"
      "- Every question must mention the {object} and the <mask label> affordance.\n"
      "- Every answer must contain the literal token " +
      std::string(kMaskToken) +
      " exactly once.\n"
      "- Number the pairs and use exactly this layout:\n"
      "1. Q: <question text>\n"
      "   A: <answer text>\n";
  std::string prompt = kTemplate;
  prompt = replace_all(prompt, "{question}", seed_question(object_name, affordance));
  prompt = replace_all(prompt, "{answer}", seed_answer(affordance));
  prompt = replace_all(prompt, "{n}", std::to_string(n_variants));
  prompt = replace_all(prompt, "{object}", object_name);
  prompt = replace_all(prompt, kMaskLabel, affordance);
  return prompt;
}

struct ParsedQa {
  std::vector<InstructionRecord> records;
  int warnings = 0;
};

// Parses numbered "Q: ... A: ..." pairs from generated text. Items without
// both parts, or whose answer does not contain the mask token exactly once,
// are dropped and counted as warnings.
inline ParsedQa parse_qa_response(const std::string& text, const std::string& object_name,
                                  const std::string& affordance, const std::string& source = "service") {
  static const std::regex item_start(R"(^\s*\d+\s*[.)]\s*)");
  std::vector<std::string> items;
  std::string current;
  bool in_item = false;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    std::smatch m;
    if (std::regex_search(line, m, item_start)) {
      if (in_item) items.push_back(current);
      current = m.suffix().str();
      in_item = true;
    } else if (in_item) {
      current += "\n" + line;
    }
    if (nl == std::string::npos) break;
    pos = nl + 1;
  }
  if (in_item) items.push_back(current);

  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n\"");
    const auto e = s.find_last_not_of(" \t\r\n\"");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  ParsedQa out;
  for (const auto& item : items) {
    const auto q = item.find("Q:");
    const auto a = item.find("A:", q == std::string::npos ? 0 : q);
    if (q == std::string::npos || a == std::string::npos) {
      ++out.warnings;
      continue;
    }
    std::string question = trim(item.substr(q + 2, a - q - 2));
    std::string answer = trim(item.substr(a + 2));
    if (question.empty() || count_occurrences(answer, kMaskToken) != 1) {
      ++out.warnings;
      continue;
    }
    out.records.push_back({question, object_name, affordance, answer, source});
  }
  return out;
}

namespace detail {

struct ParaphraseFrame {
  const char* question;
  const char* answer;
};

inline constexpr ParaphraseFrame kParaphraseFrames[] = {
    {"Which specific region of the {object} should we target to provide {action}?", "You can {action} the area {mask}"},
    {"Where on the {object} should we interact to {action} it?", "The region to {action} is {mask}"},
    {"To {action} with the {object}, which area should we touch?", "Touch {mask} to {action} it"},
    {"Which part of the {object} lets us {action} it?", "The part that lets you {action} it is {mask}"},
    {"If a robot wants to {action} the {object}, where should it make contact?", "It should {action} at {mask}"},
    {"Point to the region of the {object} used for the {action} action.", "The region is {mask}"},
    {"Which surface of the {object} matters when we {action} it?", "The surface {mask} matters"},
    {"Show the area of the {object} relevant to {action}.", "Here is the area: {mask}"},
};

}  // namespace detail

inline constexpr int kParaphraseFrameCount = static_cast<int>(std::size(detail::kParaphraseFrames));

// Deterministic offline stand-in for model-based augmentation: a seeded
// permutation of fixed question/answer frames.
inline std::vector<InstructionRecord> rule_paraphrase(const std::string& object_name, const std::string& affordance,
                                                      int n_variants, std::uint64_t seed) {
  if (n_variants < 1) throw InvalidArgument("rule_paraphrase: n_variants must be >= 1");
  if (object_name.empty() || affordance.empty()) throw InvalidArgument("rule_paraphrase: empty name");
  std::vector<int> order(static_cast<std::size_t>(kParaphraseFrameCount));
  for (int i = 0; i < kParaphraseFrameCount; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  std::vector<InstructionRecord> out;
  for (int v = 0; v < n_variants; ++v) {
    const auto& f = detail::kParaphraseFrames[order[static_cast<std::size_t>(v % kParaphraseFrameCount)]];
    auto fill = [&](std::string s) {
      s = replace_all(s, "{object}", object_name);
      s = replace_all(s, "{action}", affordance);
      return replace_all(s, "{mask}", kMaskToken);
    };
    out.push_back({fill(f.question), object_name, affordance, fill(f.answer), "rule"});
  }
  return out;
}

// ---------------------------------------------------------------- text encoding

// Lowercased maximal runs of [a-z0-9_] and non-ASCII bytes.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u) || ch == '_' || u >= 0x80) {
      cur.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : ch);
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct TextEncoderConfig {
  Index vocab_size = 1024;  // hash buckets
  Index token_dim = 32;
  Index text_dim = 32;      // D_t
};

template <class T>
class TextEncoder {
 public:
  TextEncoder(ParamStore<T>& store, const TextEncoderConfig& cfg, Rng& rng, const std::string& prefix = "text")
      : cfg_(cfg) {
    if (cfg_.vocab_size < 1 || cfg_.token_dim < 1 || cfg_.text_dim < 1)
      throw InvalidArgument("text encoder: sizes must be positive");
    Matrix<T> table(cfg_.vocab_size, cfg_.token_dim);
    for (Index i = 0; i < table.size(); ++i) table.data()[i] = static_cast<T>(rng.normal() * 0.5);
    table_ = &store.add(prefix + ".embedding", std::move(table));
    proj_ = LinearLayer<T>::make(store, prefix + ".proj", cfg_.token_dim, cfg_.text_dim, rng);
  }

  Index bucket(std::string_view token) const {
    return static_cast<Index>(fnv1a(token) % static_cast<std::uint64_t>(cfg_.vocab_size));
  }

  std::vector<Index> buckets(std::string_view text) const {
    std::vector<Index> ids;
    for (const auto& tok : tokenize(text)) ids.push_back(bucket(tok));
    return ids;
  }

  // Mean of hashed token vectors, projected to D_t. Returns 1 x D_t.
  ad::Var<T> encode(ad::Tape<T>& tape, std::string_view text) const {
    auto ids = buckets(text);
    if (ids.empty()) throw InvalidArgument("encode_text: instruction has no tokens");
    auto rows = ad::gather_rows(tape.param(*table_), std::move(ids));
    return proj_(tape, ad::mean_rows(rows));
  }

  const TextEncoderConfig& config() const { return cfg_; }
  const Parameter<T>& table() const { return *table_; }
  const LinearLayer<T>& projection() const { return proj_; }

 private:
  TextEncoderConfig cfg_;
  Parameter<T>* table_ = nullptr;
  LinearLayer<T> proj_;
};

// Two-layer head over [text embedding ; global point embedding] -> 18 logits.
template <class T>
class MaskLabelClassifier {
 public:
  MaskLabelClassifier(ParamStore<T>& store, Index text_dim, Index point_dim, Index hidden, Rng& rng,
                      const std::string& prefix = "classifier") {
    fc1_ = LinearLayer<T>::make(store, prefix + ".fc1", text_dim + point_dim, hidden, rng);
    fc2_ = LinearLayer<T>::make(store, prefix + ".fc2", hidden, kNumAffordanceLabels, rng);
  }

  // text: B x D_t, point_global: B x D_out -> B x 18
  ad::Var<T> logits(ad::Tape<T>& tape, const ad::Var<T>& text, const ad::Var<T>& point_global) const {
    if (!text.value().allFinite() || !point_global.value().allFinite())
      throw NumericalError("classify_mask_label: non-finite embedding");
    return fc2_(tape, ad::relu(fc1_(tape, ad::concat_cols<T>({text, point_global}))));
  }

 private:
  LinearLayer<T> fc1_, fc2_;
};

template <class T>
struct QueryEmbedding {
  ad::Var<T> one_hot;  // B x 18
  ad::Var<T> q;        // B x D_q
};

inline int argmax_label(std::span<const double> logits) {
  if (logits.empty()) throw InvalidArgument("argmax_label: empty logits");
  int best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

// argmax -> one-hot (straight-through) -> learned projection to D_q.
template <class T>
class QueryProjector {
 public:
  QueryProjector(ParamStore<T>& store, Index query_dim, Rng& rng, const std::string& prefix = "query") {
    proj_ = LinearLayer<T>::make(store, prefix + ".proj", kNumAffordanceLabels, query_dim, rng);
  }

  QueryEmbedding<T> operator()(ad::Tape<T>& tape, const ad::Var<T>& logits) const {
    if (logits.cols() != kNumAffordanceLabels) throw InvalidArgument("make_query_embedding: expected 18 logits");
    auto one_hot = ad::straight_through_one_hot(logits);
    return {one_hot, proj_(tape, one_hot)};
  }

  // Query for a known label (no logits involved).
  ad::Var<T> for_label(ad::Tape<T>& tape, int label) const {
    Matrix<T> oh = Matrix<T>::Zero(1, kNumAffordanceLabels);
    oh(0, label) = T(1);
    return proj_(tape, tape.constant(oh));
  }

  const LinearLayer<T>& projection() const { return proj_; }

 private:
  LinearLayer<T> proj_;
};

}  // namespace pavlm
