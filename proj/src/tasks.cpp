// SPDX-License-Identifier: Apache-2.0
#include "neuronlab/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "neuronlab/error.hpp"
#include "neuronlab/rng.hpp"

namespace nlab {

namespace {

constexpr TaskFamily kFamilies[] = {TaskFamily::keyword_sentiment, TaskFamily::keyword_spot,
                                    TaskFamily::lead_class,        TaskFamily::sequence_copy,
                                    TaskFamily::sequence_reverse,  TaskFamily::token_map};

constexpr int kSentimentPolar = 6;  // positive words, then as many negative words
constexpr int kSpotTriggers = 3;

// Every family of a variant draws on the same word pool; `offset` rotates the
// pool so a word plays a different role in each family.
constexpr int kPoolWords = 24;

struct FamilyInfo {
    const char* name;
    const char* instruction;
    int offset;
    int slice_size;
    int min_len;
    int max_len;
};

FamilyInfo info(TaskFamily f) {
    switch (f) {
        case TaskFamily::keyword_sentiment: return {"sentiment", "@sentiment", 0, 20, 5, 7};
        case TaskFamily::keyword_spot: return {"spot", "@spot", 4, 12, 4, 6};
        case TaskFamily::lead_class: return {"lead", "@lead", 8, 12, 3, 5};
        case TaskFamily::sequence_copy: return {"copy", "@copy", 12, 12, 3, 5};
        case TaskFamily::sequence_reverse: return {"reverse", "@reverse", 16, 12, 3, 5};
        case TaskFamily::token_map: return {"map", "@map", 20, 12, 3, 5};
    }
    return {"?", "?", 0, 0, 0, 0};
}

// Smallest slice that still supports each family's construction.
int min_slice_words(TaskFamily f) {
    switch (f) {
        case TaskFamily::keyword_sentiment: return 2 * kSentimentPolar + 2;
        case TaskFamily::keyword_spot: return kSpotTriggers + 1;
        default: return 2;
    }
}

std::string join(const std::vector<std::string>& words) {
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) out += ' ';
        out += words[i];
    }
    return out;
}

}  // namespace

std::string_view family_name(TaskFamily f) noexcept { return info(f).name; }

TaskFamily parse_family(std::string_view name) {
    for (auto f : kFamilies) {
        if (name == info(f).name) return f;
    }
    throw InputError("unknown task family '" + std::string(name) + "'");
}

TaskKind family_kind(TaskFamily f) noexcept {
    switch (f) {
        case TaskFamily::sequence_copy:
        case TaskFamily::sequence_reverse:
        case TaskFamily::token_map: return TaskKind::generation;
        default: return TaskKind::classification;
    }
}

std::string_view kind_name(TaskKind k) noexcept { return k == TaskKind::classification ? "classification" : "generation"; }

std::string TaskSpec::name() const { return std::string(family_name(family)) + (variant == 0 ? "_a" : "_b"); }

TaskSpec TaskSpec::resolved() const {
    TaskSpec s = *this;
    const FamilyInfo fi = info(family);
    if (variant != 0 && variant != 1) throw InputError("task variant must be 0 or 1");
    if (s.min_len == 0) s.min_len = fi.min_len;
    if (s.max_len == 0) s.max_len = std::max(fi.max_len, s.min_len);
    if (s.slice_words == 0) s.slice_words = fi.slice_size;
    if (s.min_len < 1 || s.max_len < s.min_len) throw InputError(name() + ": invalid length range");
    if (s.slice_words > fi.slice_size) {
        throw InputError(name() + ": slice has only " + std::to_string(fi.slice_size) + " words");
    }
    if (s.slice_words < min_slice_words(family)) {
        throw InputError(name() + ": vocab slice of " + std::to_string(s.slice_words) +
                         " words is too small for the requested diversity");
    }
    if (family == TaskFamily::token_map && s.slice_words < 2) throw InputError(name() + ": token map needs >= 2 words");
    // prompt + answer must fit a 64-token context with room to spare
    if (s.max_len > 24) throw InputError(name() + ": max_len above 24 is not supported");
    return s;
}

void to_json(nlohmann::json& j, const TaskSpec& s) {
    j = nlohmann::json{{"family", std::string(family_name(s.family))},
                       {"variant", s.variant == 0 ? "a" : "b"},
                       {"kind", std::string(kind_name(s.kind()))},
                       {"min_len", s.min_len},
                       {"max_len", s.max_len},
                       {"slice_words", s.slice_words},
                       {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, TaskSpec& s) {
    s.family = parse_family(j.at("family").get<std::string>());
    auto v = j.value("variant", std::string("a"));
    if (v != "a" && v != "b") throw InputError("task variant must be \"a\" or \"b\"");
    s.variant = v == "a" ? 0 : 1;
    s.min_len = j.value("min_len", 0);
    s.max_len = j.value("max_len", 0);
    s.slice_words = j.value("slice_words", 0);
    s.seed = j.value("seed", std::uint64_t{0});
}

TaskSpec parse_task_name(std::string_view name, std::uint64_t seed) {
    auto us = name.rfind('_');
    if (us == std::string_view::npos || us + 2 != name.size() || (name[us + 1] != 'a' && name[us + 1] != 'b')) {
        throw InputError("task name '" + std::string(name) + "' must look like <family>_a or <family>_b");
    }
    TaskSpec s;
    s.family = parse_family(name.substr(0, us));
    s.variant = name[us + 1] == 'a' ? 0 : 1;
    s.seed = seed;
    return s;
}

// -- vocabulary ----------------------------------------------------------------

Vocabulary::Vocabulary() {
    auto add = [this](const std::string& w) {
        index_.emplace(w, static_cast<int>(words_.size()));
        words_.push_back(w);
        return static_cast<int>(words_.size()) - 1;
    };
    pad_ = add("<pad>");
    bos_ = add("<bos>");
    sep_ = add("<sep>");
    eos_ = add("<eos>");
    for (auto f : kFamilies) {
        instructions_[static_cast<int>(f)] = info(f).instruction;
        add(info(f).instruction);
    }
    for (const char* w : {"positive", "negative", "yes", "no"}) add(w);
    std::vector<std::string> pools[2];
    for (int v = 0; v < 2; ++v) {
        for (int k = 0; k < kPoolWords; ++k) {
            pools[v].push_back(std::string("w") + (v == 0 ? "a" : "b") + std::to_string(k));
            add(pools[v].back());
        }
    }
    for (auto f : kFamilies) {
        const FamilyInfo fi = info(f);
        for (int v = 0; v < 2; ++v) {
            auto& words = slices_[{static_cast<int>(f), v}];
            for (int k = 0; k < fi.slice_size; ++k) words.push_back(pools[v][static_cast<std::size_t>((fi.offset + k) % kPoolWords)]);
        }
    }
}

const Vocabulary& Vocabulary::synthetic() {
    static const Vocabulary vocab;
    return vocab;
}

int Vocabulary::id(std::string_view word) const {
    auto it = index_.find(word);
    if (it == index_.end()) throw InputError("token '" + std::string(word) + "' is not in the vocabulary");
    return it->second;
}

bool Vocabulary::contains(std::string_view word) const { return index_.find(word) != index_.end(); }

const std::string& Vocabulary::word(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) throw InputError("token id out of range");
    return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::tokenize(std::string_view text) const {
    std::vector<int> out;
    for (const auto& w : split_words(text)) out.push_back(id(w));
    return out;
}

std::string Vocabulary::detokenize(std::span<const int> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += word(ids[i]);
    }
    return out;
}

const std::vector<std::string>& Vocabulary::slice(TaskFamily f, int variant) const {
    return slices_.at({static_cast<int>(f), variant});
}

const std::string& Vocabulary::instruction(TaskFamily f) const { return instructions_.at(static_cast<int>(f)); }

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j > i) out.emplace_back(text.substr(i, j - i));
        i = j;
    }
    return out;
}

EncodedExample encode_example(const Example& ex, const Vocabulary& vocab) {
    EncodedExample e;
    e.prompt.push_back(vocab.bos());
    for (int t : vocab.tokenize(ex.input)) e.prompt.push_back(t);
    e.prompt.push_back(vocab.sep());
    e.answer = vocab.tokenize(ex.target);
    if (e.answer.empty()) throw InputError("example for task '" + ex.task + "' has an empty target");
    std::vector<int> full = e.prompt;
    full.insert(full.end(), e.answer.begin(), e.answer.end());
    full.push_back(vocab.eos());
    e.tokens.assign(full.begin(), full.end() - 1);
    e.targets.assign(e.tokens.size(), -1);
    for (std::size_t t = e.prompt.size() - 1; t < e.tokens.size(); ++t) e.targets[t] = full[t + 1];
    return e;
}

// -- generation ----------------------------------------------------------------

namespace {

struct Draw {
    std::vector<std::string> input;
    std::string target;
};

std::vector<std::string> pick(Rng& rng, const std::vector<std::string>& pool, int n) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) out.push_back(pool[rng.below(pool.size())]);
    return out;
}

Draw draw_example(const TaskSpec& s, const std::vector<std::string>& slice, Rng& rng) {
    const int len = s.min_len + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.max_len - s.min_len + 1)));
    const bool positive = rng.below(2) == 0;
    Draw d;
    switch (s.family) {
        case TaskFamily::keyword_sentiment: {
            std::vector<std::string> pos(slice.begin(), slice.begin() + kSentimentPolar);
            std::vector<std::string> neg(slice.begin() + kSentimentPolar, slice.begin() + 2 * kSentimentPolar);
            std::vector<std::string> filler(slice.begin() + 2 * kSentimentPolar, slice.begin() + s.slice_words);
            int keywords = std::min(len, rng.below(2) == 0 ? 1 : 3);
            int majority = keywords == 1 ? 1 : 2 + static_cast<int>(rng.below(2));
            auto& win = positive ? pos : neg;
            auto& lose = positive ? neg : pos;
            auto words = pick(rng, win, majority);
            auto other = pick(rng, lose, keywords - majority);
            auto fill = pick(rng, filler, len - keywords);
            words.insert(words.end(), other.begin(), other.end());
            words.insert(words.end(), fill.begin(), fill.end());
            rng.shuffle(words);
            d.input = words;
            d.target = positive ? "positive" : "negative";
            break;
        }
        case TaskFamily::keyword_spot: {
            std::vector<std::string> triggers(slice.begin(), slice.begin() + kSpotTriggers);
            std::vector<std::string> filler(slice.begin() + kSpotTriggers, slice.begin() + s.slice_words);
            auto words = pick(rng, filler, len);
            if (positive) words[rng.below(static_cast<std::uint64_t>(len))] = triggers[rng.below(triggers.size())];
            d.input = words;
            d.target = positive ? "yes" : "no";
            break;
        }
        case TaskFamily::lead_class: {
            const auto half = static_cast<std::size_t>(s.slice_words / 2);
            std::vector<std::string> first(slice.begin(), slice.begin() + half);
            std::vector<std::string> second(slice.begin() + half, slice.begin() + s.slice_words);
            std::vector<std::string> pool(slice.begin(), slice.begin() + s.slice_words);
            d.input = pick(rng, positive ? first : second, 1);
            auto rest = pick(rng, pool, len - 1);
            d.input.insert(d.input.end(), rest.begin(), rest.end());
            d.target = positive ? "yes" : "no";
            break;
        }
        case TaskFamily::sequence_copy:
        case TaskFamily::sequence_reverse:
        case TaskFamily::token_map: {
            std::vector<std::string> pool(slice.begin(), slice.begin() + s.slice_words);
            auto words = pick(rng, pool, len);
            std::vector<std::string> out = words;
            if (s.family == TaskFamily::sequence_reverse) std::reverse(out.begin(), out.end());
            if (s.family == TaskFamily::token_map) {
                const std::size_t n = pool.size();
                const std::size_t shift = n / 2 - 1;
                for (auto& w : out) {
                    auto k = static_cast<std::size_t>(std::find(pool.begin(), pool.end(), w) - pool.begin());
                    w = pool[(k + shift) % n];
                }
            }
            d.input = words;
            d.target = join(out);
            break;
        }
    }
    return d;
}

}  // namespace

TaskData generate_task_suite(const TaskSpec& spec, std::size_t n_train, std::size_t n_test) {
    if (n_train < 1 || n_test < 1) throw InputError("generate_task_suite: n_train and n_test must be >= 1");
    TaskSpec s = spec.resolved();
    const auto& vocab = Vocabulary::synthetic();
    const auto& slice = vocab.slice(s.family, s.variant);
    const std::string instr = vocab.instruction(s.family);
    const std::string task = s.name();
    Rng rng(Rng::derive(s.seed, static_cast<std::uint64_t>(s.family) * 2 + static_cast<std::uint64_t>(s.variant)));

    TaskData out{s, {}, {}};
    std::set<std::string> seen;
    const std::size_t wanted = n_train + n_test;
    std::size_t misses = 0;
    std::vector<Example> all;
    while (all.size() < wanted) {
        Draw d = draw_example(s, slice, rng);
        std::string input = instr + " " + join(d.input);
        if (!seen.insert(input).second) {
            // a run of duplicates means the slice cannot supply this many distinct examples
            if (++misses > 200 + 20 * wanted) {
                throw InputError(task + ": vocab slice too small for " + std::to_string(wanted) + " distinct examples");
            }
            continue;
        }
        misses = 0;
        all.push_back({std::move(input), d.target, task});
    }
    out.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train), all.end());
    return out;
}

// -- metrics -------------------------------------------------------------------

double accuracy(std::span<const std::string> predictions, std::span<const std::string> labels) {
    if (predictions.size() != labels.size()) throw ContractViolation("accuracy: prediction/label counts differ");
    if (predictions.empty()) throw InputError("accuracy: no predictions");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference) {
    if (candidate.empty() || reference.empty()) throw InputError("rouge_l: empty token sequence");
    const double lcs = static_cast<double>(lcs_length(candidate, reference));
    const double p = lcs / static_cast<double>(candidate.size());
    const double r = lcs / static_cast<double>(reference.size());
    if (p + r == 0.0) return 0.0;
    return 2.0 * p * r / (p + r);
}

double rouge_l(std::string_view candidate, std::string_view reference) {
    auto c = split_words(candidate);
    auto r = split_words(reference);
    return rouge_l(c, r);
}

// -- persistence ---------------------------------------------------------------

void save_jsonl(const Dataset& data, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw FileError("cannot write " + path.string());
    for (const auto& ex : data) {
        nlohmann::ordered_json j;
        j["input"] = ex.input;
        j["target"] = ex.target;
        j["task"] = ex.task;
        os << j.dump() << '\n';
    }
    if (!os) throw FileError("failed writing " + path.string());
}

Dataset load_jsonl(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw FileError("cannot open " + path.string());
    Dataset out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(lineno, std::string("malformed JSON: ") + e.what());
        }
        if (!j.is_object()) throw ParseError(lineno, "expected a JSON object");
        Example ex;
        for (auto [key, dst] : {std::pair{"input", &ex.input}, std::pair{"target", &ex.target}, std::pair{"task", &ex.task}}) {
            if (!j.contains(key) || !j[key].is_string()) {
                throw SchemaError("line " + std::to_string(lineno) + ": missing string field '" + key + "'");
            }
            *dst = j[key].get<std::string>();
        }
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace nlab
