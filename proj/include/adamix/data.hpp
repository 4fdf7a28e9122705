#pragma once

// Tokenization, TSV ingestion, batching and the synthetic classification
// tasks used for desk-scale experiments.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "adamix/errors.hpp"
#include "adamix/rng.hpp"
#include "adamix/transformer.hpp"

namespace adamix {

inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kFirstTokenId = 3;

/// Whitespace vocabulary; ids 0..2 are reserved for pad, unk and cls.
class Vocab {
public:
    [[nodiscard]] int id(const std::string& token) const {
        auto it = ids_.find(token);
        return it == ids_.end() ? kUnkId : it->second;
    }
    [[nodiscard]] const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    [[nodiscard]] std::size_t size() const { return tokens_.size(); }
    [[nodiscard]] const std::vector<std::string>& tokens() const { return tokens_; }

    void add(const std::string& token) {
        if (ids_.count(token)) return;
        ids_.emplace(token, static_cast<int>(tokens_.size()));
        tokens_.push_back(token);
    }

    Vocab() {
        for (const char* reserved : {"<pad>", "<unk>", "<cls>"}) add(reserved);
    }

private:
    std::unordered_map<std::string, int> ids_;
    std::vector<std::string> tokens_;
};

inline std::vector<std::string> split_whitespace(const std::string& text) {
    std::istringstream is(text);
    std::vector<std::string> out;
    for (std::string tok; is >> tok;) out.push_back(tok);
    return out;
}

/// Tokens ordered by descending frequency, ties broken lexicographically.
/// `max_size` caps the vocabulary (reserved ids included); 0 means no cap.
inline Vocab build_vocab(std::span<const std::string> lines, std::size_t max_size = 0) {
    if (lines.empty()) throw DataError("cannot build a vocabulary from an empty corpus");
    std::map<std::string, std::size_t> counts;
    for (const auto& line : lines)
        for (const auto& tok : split_whitespace(line)) ++counts[tok];
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab vocab;
    for (const auto& [tok, n] : ranked) {
        if (max_size && vocab.size() >= max_size) break;
        vocab.add(tok);
    }
    return vocab;
}

struct LabeledExample {
    std::vector<int> tokens;
    int label = 0;
    friend bool operator==(const LabeledExample&, const LabeledExample&) = default;
};

struct Dataset {
    std::vector<LabeledExample> train;
    std::vector<LabeledExample> test;
};

/// cls + tokens, truncated or padded to exactly `max_len` ids.
inline std::vector<int> encode(const Vocab& vocab, const std::string& text, std::size_t max_len) {
    std::vector<int> ids{kClsId};
    for (const auto& tok : split_whitespace(text)) {
        if (ids.size() >= max_len) break;
        ids.push_back(vocab.id(tok));
    }
    ids.resize(max_len, kPadId);
    return ids;
}

struct TsvRow {
    std::string text;
    std::string label;
};

inline std::vector<TsvRow> read_tsv_rows(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::vector<TsvRow> rows;
    std::string line;
    for (std::size_t number = 1; std::getline(in, line); ++number) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto tab = line.rfind('\t');
        if (tab == std::string::npos) throw DataError(path + ":" + std::to_string(number) + ": expected text<TAB>label");
        rows.push_back({line.substr(0, tab), line.substr(tab + 1)});
        if (rows.back().label.empty()) throw DataError(path + ":" + std::to_string(number) + ": empty label");
    }
    return rows;
}

inline std::vector<std::string> read_tsv_texts(const std::string& path) {
    std::vector<std::string> out;
    for (auto& row : read_tsv_rows(path)) out.push_back(std::move(row.text));
    return out;
}

/// Rows of "text<TAB>label" with integer labels in [0, num_classes).
inline std::vector<LabeledExample> load_tsv(const std::string& path, const Vocab& vocab, std::size_t max_len,
                                            std::size_t num_classes) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::vector<LabeledExample> out;
    std::string line;
    for (std::size_t number = 1; std::getline(in, line); ++number) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::string where = path + ":" + std::to_string(number);
        const auto tab = line.rfind('\t');
        if (tab == std::string::npos) throw DataError(where + ": expected text<TAB>label");
        const std::string label = line.substr(tab + 1);
        int value = -1;
        std::size_t used = 0;
        try {
            value = std::stoi(label, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != label.size() || label.empty() || value < 0 || static_cast<std::size_t>(value) >= num_classes) {
            throw DataError(where + ": unknown label '" + label + "'");
        }
        out.push_back({encode(vocab, line.substr(0, tab), max_len), value});
    }
    return out;
}

/// Writes examples back out as "t<id> t<id> ...<TAB>label" (pads and the
/// leading cls dropped).
inline void export_tsv(std::ostream& os, std::span<const LabeledExample> examples) {
    for (const auto& ex : examples) {
        bool first = true;
        for (int id : ex.tokens) {
            if (id == kPadId || id == kClsId) continue;
            os << (first ? "" : " ") << 't' << id;
            first = false;
        }
        os << '\t' << ex.label << '\n';
    }
}

enum class TaskKind { majority, parity, keyphrase };

inline TaskKind parse_task_kind(const std::string& s) {
    if (s == "majority") return TaskKind::majority;
    if (s == "parity") return TaskKind::parity;
    if (s == "keyphrase") return TaskKind::keyphrase;
    throw ConfigError("task.kind: unknown synthetic task '" + s + "'");
}

inline const char* to_string(TaskKind k) {
    switch (k) {
        case TaskKind::majority: return "majority";
        case TaskKind::parity: return "parity";
        case TaskKind::keyphrase: return "keyphrase";
    }
    return "?";
}

struct SyntheticSpec {
    TaskKind kind = TaskKind::keyphrase;
    std::size_t examples = 4000;
    std::size_t vocab_size = 64;
    std::size_t seq_len = 16;  // includes the leading cls
    std::size_t num_classes = 4;
    std::uint64_t seed = 13;
};

/// Number of planted bigrams for the keyphrase task: enough bits for every class.
inline std::size_t keyphrase_bits(std::size_t num_classes) {
    std::size_t bits = 1;
    while ((std::size_t{1} << bits) < num_classes) ++bits;
    return bits;
}

/// Majority bucket of a token sequence (bucket = token id mod C); -1 on ties.
inline int majority_label(std::span<const int> content, std::size_t num_classes) {
    std::vector<std::size_t> counts(num_classes, 0);
    for (int id : content) ++counts[static_cast<std::size_t>(id) % num_classes];
    const auto best = std::max_element(counts.begin(), counts.end());
    if (std::count(counts.begin(), counts.end(), *best) > 1) return -1;
    return static_cast<int>(best - counts.begin());
}

namespace detail {

inline std::vector<int> synthetic_content(const SyntheticSpec& spec, int target, Rng& rng) {
    const std::size_t len = spec.seq_len - 1;
    const int first = kFirstTokenId, last = static_cast<int>(spec.vocab_size) - 1;
    std::vector<int> content(len);
    switch (spec.kind) {
        case TaskKind::majority: {
            // Bias draws toward the target bucket, then keep only sequences whose
            // majority really is the target.
            std::uniform_int_distribution<int> any(first, last);
            std::bernoulli_distribution biased(0.4);
            std::vector<int> bucket;
            for (int id = first; id <= last; ++id)
                if (static_cast<std::size_t>(id) % spec.num_classes == static_cast<std::size_t>(target)) bucket.push_back(id);
            std::uniform_int_distribution<std::size_t> in_bucket(0, bucket.size() - 1);
            for (;;) {
                for (int& id : content) id = biased(rng) ? bucket[in_bucket(rng)] : any(rng);
                if (majority_label(content, spec.num_classes) == target) return content;
            }
        }
        case TaskKind::parity: {
            // Token `first` is the marker; label = marker count mod C.
            std::uniform_int_distribution<int> filler(first + 1, last);
            std::uniform_int_distribution<std::size_t> count_dist(0, len / 2);
            for (;;) {
                const std::size_t markers = count_dist(rng);
                if (markers % spec.num_classes != static_cast<std::size_t>(target)) continue;
                for (int& id : content) id = filler(rng);
                std::vector<std::size_t> pos(len);
                std::iota(pos.begin(), pos.end(), 0);
                std::shuffle(pos.begin(), pos.end(), rng);
                for (std::size_t i = 0; i < markers; ++i) content[pos[i]] = first;
                return content;
            }
        }
        case TaskKind::keyphrase: {
            // Bigram b is the token pair (first + 2b, first + 2b + 1); those ids
            // never appear as filler. Bit b of the label says whether bigram b
            // is planted.
            const std::size_t bits = keyphrase_bits(spec.num_classes);
            const int filler_first = first + static_cast<int>(2 * bits);
            std::uniform_int_distribution<int> filler(filler_first, last);
            for (int& id : content) id = filler(rng);
            std::vector<std::size_t> slots(len / 2);
            std::iota(slots.begin(), slots.end(), 0);
            std::shuffle(slots.begin(), slots.end(), rng);
            std::size_t used = 0;
            for (std::size_t b = 0; b < bits; ++b) {
                if (!((static_cast<std::size_t>(target) >> b) & 1U)) continue;
                const std::size_t at = 2 * slots[used++];
                content[at] = first + static_cast<int>(2 * b);
                content[at + 1] = first + static_cast<int>(2 * b + 1);
            }
            return content;
        }
    }
    return content;
}

}  // namespace detail

/// Label of a keyphrase sequence, recomputed from the tokens.
inline int keyphrase_label(std::span<const int> content, std::size_t num_classes) {
    const std::size_t bits = keyphrase_bits(num_classes);
    int label = 0;
    for (std::size_t b = 0; b < bits; ++b) {
        const int lead = kFirstTokenId + static_cast<int>(2 * b);
        for (std::size_t i = 0; i + 1 < content.size(); ++i) {
            if (content[i] == lead && content[i + 1] == lead + 1) {
                label |= 1 << b;
                break;
            }
        }
    }
    return label;
}

/// Deterministic generator; every class is drawn uniformly and the sequence
/// is resampled until it carries that class, so classes stay balanced.
/// The result is split 80/20 after a seeded shuffle.
inline Dataset synthetic_task(const SyntheticSpec& spec) {
    if (spec.examples == 0 || spec.seq_len < 2 || spec.num_classes < 2) {
        throw ConfigError("synthetic task needs examples > 0, seq_len >= 2 and at least 2 classes");
    }
    const std::size_t content_len = spec.seq_len - 1;
    const int first = kFirstTokenId;
    const int available = static_cast<int>(spec.vocab_size) - first;
    switch (spec.kind) {
        case TaskKind::majority:
            if (available < static_cast<int>(spec.num_classes)) throw ConfigError("task.vocab too small for majority task");
            break;
        case TaskKind::parity:
            if (available < 2 || content_len / 2 + 1 < spec.num_classes) throw ConfigError("task.vocab or seq_len too small for parity task");
            break;
        case TaskKind::keyphrase: {
            const std::size_t bits = keyphrase_bits(spec.num_classes);
            if (available <= static_cast<int>(2 * bits) || content_len / 2 < bits) {
                throw ConfigError("task.vocab or seq_len too small for keyphrase task");
            }
            break;
        }
    }
    Rng rng(spec.seed);
    std::uniform_int_distribution<int> class_dist(0, static_cast<int>(spec.num_classes) - 1);
    std::vector<LabeledExample> all;
    all.reserve(spec.examples);
    for (std::size_t i = 0; i < spec.examples; ++i) {
        const int target = class_dist(rng);
        std::vector<int> tokens{kClsId};
        const auto content = detail::synthetic_content(spec, target, rng);
        tokens.insert(tokens.end(), content.begin(), content.end());
        all.push_back({std::move(tokens), target});
    }
    std::shuffle(all.begin(), all.end(), rng);
    const std::size_t n_train = spec.examples * 4 / 5;
    Dataset out;
    out.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train), all.end());
    return out;
}

struct Batch {
    TokenBatch tokens;
    std::vector<int> labels;
};

inline Batch make_batch(std::span<const LabeledExample> examples, std::span<const std::size_t> indices) {
    Batch batch;
    batch.tokens.batch = indices.size();
    batch.tokens.seq = examples[indices.front()].tokens.size();
    for (std::size_t i : indices) {
        const auto& ex = examples[i];
        if (ex.tokens.size() != batch.tokens.seq) throw DataError("examples in one batch have different lengths");
        batch.tokens.ids.insert(batch.tokens.ids.end(), ex.tokens.begin(), ex.tokens.end());
        batch.labels.push_back(ex.label);
    }
    return batch;
}

/// Index lists for one epoch: a seeded shuffle cut into `batch_size` chunks,
/// keeping the final partial chunk.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, Rng& rng) {
    if (batch_size == 0) throw ConfigError("train.batch_size must be at least 1");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < n; i += batch_size) {
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
    }
    return out;
}

inline std::vector<Batch> batch_iter(std::span<const LabeledExample> examples, std::size_t batch_size, Rng& rng) {
    std::vector<Batch> out;
    for (const auto& idx : batch_indices(examples.size(), batch_size, rng)) out.push_back(make_batch(examples, idx));
    return out;
}

/// Sequential (unshuffled) batches for evaluation.
inline std::vector<Batch> sequential_batches(std::span<const LabeledExample> examples, std::size_t batch_size) {
    std::vector<Batch> out;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        idx.push_back(i);
        if (idx.size() == batch_size || i + 1 == examples.size()) {
            out.push_back(make_batch(examples, idx));
            idx.clear();
        }
    }
    return out;
}

/// CRC-32 over labels and token ids of every example.
inline std::uint32_t dataset_checksum(std::span<const LabeledExample> examples) {
    boost::crc_32_type crc;
    for (const auto& ex : examples) {
        crc.process_bytes(&ex.label, sizeof ex.label);
        crc.process_bytes(ex.tokens.data(), ex.tokens.size() * sizeof(int));
    }
    return crc.checksum();
}

}  // namespace adamix
