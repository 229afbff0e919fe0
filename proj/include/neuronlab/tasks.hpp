// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic task suites over a closed whitespace-token vocabulary.
//
// Every family has two variants ("a" and "b") that share the instruction
// token and label semantics but draw their content words from disjoint word
// pools, so one variant can serve as the out-of-domain twin of the other.
// Within a variant all families share one pool, each family assigning the
// words different roles.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace nlab {

enum class TaskKind { classification, generation };

enum class TaskFamily {
    keyword_sentiment,  ///< majority polarity of keywords -> positive / negative
    keyword_spot,       ///< one of the trigger words occurs -> yes / no
    lead_class,         ///< first word from the slice's first half -> yes / no
    sequence_copy,      ///< target = input words
    sequence_reverse,   ///< target = input words reversed
    token_map,          ///< target = fixed word-to-word substitution of input
};

std::string_view family_name(TaskFamily f) noexcept;
TaskFamily parse_family(std::string_view name);
TaskKind family_kind(TaskFamily f) noexcept;
std::string_view kind_name(TaskKind k) noexcept;

struct TaskSpec {
    TaskFamily family = TaskFamily::keyword_sentiment;
    int variant = 0;  ///< 0 -> "a", 1 -> "b"
    int min_len = 0;  ///< 0 selects the family default
    int max_len = 0;
    int slice_words = 0;  ///< content words drawn from the slice; 0 = whole slice
    std::uint64_t seed = 0;

    TaskKind kind() const noexcept { return family_kind(family); }
    /// e.g. "sentiment_a"
    std::string name() const;
    /// Resolves defaults and checks knobs against the vocabulary. Throws InputError.
    TaskSpec resolved() const;

    bool operator==(const TaskSpec&) const = default;
};

void to_json(nlohmann::json& j, const TaskSpec& s);
void from_json(const nlohmann::json& j, TaskSpec& s);
/// Parses "sentiment_a" style names.
TaskSpec parse_task_name(std::string_view name, std::uint64_t seed = 0);

struct Example {
    std::string input;   ///< instruction token followed by content words
    std::string target;  ///< label word or output word sequence
    std::string task;

    bool operator==(const Example&) const = default;
};

using Dataset = std::vector<Example>;

struct TaskData {
    TaskSpec spec;
    Dataset train;
    Dataset test;
};

/// Deterministic in `spec.seed`; train and test never share an input string.
TaskData generate_task_suite(const TaskSpec& spec, std::size_t n_train, std::size_t n_test);

// -- vocabulary ---------------------------------------------------------------

class Vocabulary {
public:
    static const Vocabulary& synthetic();

    int size() const noexcept { return static_cast<int>(words_.size()); }
    int id(std::string_view word) const;  ///< throws InputError on unknown words
    bool contains(std::string_view word) const;
    const std::string& word(int id) const;

    std::vector<int> tokenize(std::string_view text) const;
    std::string detokenize(std::span<const int> ids) const;

    int pad() const { return pad_; }
    int bos() const { return bos_; }
    int sep() const { return sep_; }
    int eos() const { return eos_; }

    /// Content words of a family's variant slice, in slice order.
    const std::vector<std::string>& slice(TaskFamily f, int variant) const;
    const std::string& instruction(TaskFamily f) const;

private:
    Vocabulary();

    std::vector<std::string> words_;
    std::map<std::string, int, std::less<>> index_;
    std::map<std::pair<int, int>, std::vector<std::string>> slices_;
    std::map<int, std::string> instructions_;
    int pad_ = 0, bos_ = 0, sep_ = 0, eos_ = 0;
};

/// Whitespace split.
std::vector<std::string> split_words(std::string_view text);

/// Token layout used for training and scoring:
///   tokens  = <bos> input <sep> target
///   targets = -1 over the prompt, then the next token (ending with <eos>).
struct EncodedExample {
    std::vector<int> tokens;
    std::vector<int> targets;
    std::vector<int> prompt;  ///< <bos> input <sep>
    std::vector<int> answer;  ///< target tokens without <eos>
};

EncodedExample encode_example(const Example& ex, const Vocabulary& vocab = Vocabulary::synthetic());

// -- metrics ------------------------------------------------------------------

/// Exact-match fraction. Throws ContractViolation on length mismatch, InputError when empty.
double accuracy(std::span<const std::string> predictions, std::span<const std::string> labels);

/// Sentence-level Rouge-L F1 over whitespace tokens. Throws InputError on an empty side.
double rouge_l(std::string_view candidate, std::string_view reference);
double rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference);
std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

// -- persistence --------------------------------------------------------------

/// One JSON object per line with keys input, target, task (in that order).
void save_jsonl(const Dataset& data, const std::filesystem::path& path);
/// ParseError carries the 1-based line number; SchemaError for missing fields.
Dataset load_jsonl(const std::filesystem::path& path);

}  // namespace nlab
