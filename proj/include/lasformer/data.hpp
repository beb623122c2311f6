// Deterministic synthetic sequence-to-sequence tasks. Copy and reverse
// exercise local structure; longrange-recall plants marker/value bindings
// early in the source and queries them near the end, so the answer cannot be
// produced from any local window.
#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lasformer/common.hpp"
#include "lasformer/rng.hpp"

namespace lasformer {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kFirstContentId = 3;

enum class Task { Copy, Reverse, LongrangeRecall };

inline const char* to_string(Task t) {
    switch (t) {
        case Task::Copy: return "copy";
        case Task::Reverse: return "reverse";
        case Task::LongrangeRecall: return "longrange-recall";
    }
    return "?";
}

inline Task task_from_string(const std::string& s) {
    if (s == "copy") return Task::Copy;
    if (s == "reverse") return Task::Reverse;
    if (s == "longrange-recall") return Task::LongrangeRecall;
    throw ConfigError("unknown task: " + s);
}

struct TaskSpec {
    Task task = Task::Copy;
    int vocab_size = 64;
    int min_len = 16;  // content tokens between the BOS/EOS frame
    int max_len = 48;
    int min_distance = 48;  // longrange-recall only
    int max_distance = 96;
    std::uint64_t seed = 1;
    int n_train = 2048;
    int n_valid = 128;
    int n_test = 128;

    // Longrange alphabet partition of the content id range.
    static constexpr int kNumMarkers = 8;
    static constexpr int kNumValues = 16;
    static constexpr int kNumPairs = 4;
    static constexpr int kNumQueries = 2;

    int content_ids() const { return vocab_size - kFirstContentId; }
    int marker_base() const { return kFirstContentId; }
    int value_base() const { return kFirstContentId + kNumMarkers; }
    int filler_base() const { return kFirstContentId + kNumMarkers + kNumValues; }
    int filler_count() const { return vocab_size - filler_base(); }

    bool is_marker(int id) const {
        return id >= marker_base() && id < value_base();
    }
    bool is_value(int id) const {
        return id >= value_base() && id < filler_base();
    }

    void validate() const {
        if (vocab_size <= kFirstContentId + 1) {
            throw ConfigError("task: vocab too small for any content");
        }
        if (min_len < 1 || max_len < min_len) {
            throw ConfigError("task: need 1 <= min_len <= max_len");
        }
        if (task == Task::LongrangeRecall) {
            if (filler_count() < 4) {
                throw ConfigError(
                    "task: vocab too small for longrange-recall structure "
                    "(needs markers, values, and filler)");
            }
            if (min_distance < 4 || max_distance < min_distance) {
                throw ConfigError("task: need 4 <= min_distance <= max_distance");
            }
        }
        if (n_train < 1 || n_valid < 1 || n_test < 1) {
            throw ConfigError("task: all split sizes must be >= 1");
        }
    }
};

struct Example {
    std::vector<int> src;
    std::vector<int> tgt;
};

struct Dataset {
    std::vector<Example> examples;
};

enum class Split { Train, Valid, Test };

inline const char* to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Valid: return "valid";
        case Split::Test: return "test";
    }
    return "?";
}

inline Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "valid") return Split::Valid;
    if (s == "test") return Split::Test;
    throw ConfigError("unknown split: " + s);
}

namespace detail {

inline Example make_copy_like(const TaskSpec& spec, Rng& rng, bool reverse) {
    const int len = rng.uniform_int(spec.min_len, spec.max_len);
    std::vector<int> content(len);
    for (int& id : content)
        id = rng.uniform_int(kFirstContentId, spec.vocab_size - 1);
    Example ex;
    ex.src.push_back(kBosId);
    ex.src.insert(ex.src.end(), content.begin(), content.end());
    ex.src.push_back(kEosId);
    if (reverse) std::reverse(content.begin(), content.end());
    ex.tgt.push_back(kBosId);
    ex.tgt.insert(ex.tgt.end(), content.begin(), content.end());
    ex.tgt.push_back(kEosId);
    return ex;
}

inline Example make_longrange(const TaskSpec& spec, Rng& rng) {
    // Distinct markers for the pairs; values may repeat.
    std::vector<int> markers(TaskSpec::kNumMarkers);
    for (int i = 0; i < TaskSpec::kNumMarkers; ++i)
        markers[i] = spec.marker_base() + i;
    rng.shuffle(markers);
    markers.resize(TaskSpec::kNumPairs);
    std::vector<int> values(TaskSpec::kNumPairs);
    for (int& v : values)
        v = spec.value_base() + rng.uniform_int(0, TaskSpec::kNumValues - 1);

    const int filler_len = rng.uniform_int(spec.min_distance, spec.max_distance);

    Example ex;
    ex.src.push_back(kBosId);
    for (int p = 0; p < TaskSpec::kNumPairs; ++p) {
        ex.src.push_back(markers[p]);
        ex.src.push_back(values[p]);
    }
    for (int f = 0; f < filler_len; ++f)
        ex.src.push_back(spec.filler_base() +
                         rng.uniform_int(0, spec.filler_count() - 1));
    // Queried markers, distinct, in shuffled order.
    std::vector<int> query_order(TaskSpec::kNumPairs);
    for (int i = 0; i < TaskSpec::kNumPairs; ++i) query_order[i] = i;
    rng.shuffle(query_order);
    ex.tgt.push_back(kBosId);
    for (int q = 0; q < TaskSpec::kNumQueries; ++q) {
        ex.src.push_back(markers[query_order[q]]);
        ex.tgt.push_back(values[query_order[q]]);
    }
    ex.src.push_back(kEosId);
    ex.tgt.push_back(kEosId);
    return ex;
}

}  // namespace detail

// Rule-based ground truth: the target is a deterministic function of the
// source. For longrange-recall the source is scanned for marker/value
// bindings; a marker not followed by a value token is a query.
inline std::vector<int> oracle_target(const std::vector<int>& src,
                                      const TaskSpec& spec) {
    if (src.size() < 2 || src.front() != kBosId || src.back() != kEosId) {
        throw InputError("oracle_target: source is not BOS...EOS framed");
    }
    std::vector<int> content(src.begin() + 1, src.end() - 1);
    std::vector<int> tgt;
    tgt.push_back(kBosId);
    switch (spec.task) {
        case Task::Copy:
            tgt.insert(tgt.end(), content.begin(), content.end());
            break;
        case Task::Reverse:
            tgt.insert(tgt.end(), content.rbegin(), content.rend());
            break;
        case Task::LongrangeRecall: {
            std::map<int, int> binding;
            std::vector<int> answers;
            for (size_t i = 0; i < content.size(); ++i) {
                if (!spec.is_marker(content[i])) continue;
                if (i + 1 < content.size() && spec.is_value(content[i + 1])) {
                    binding[content[i]] = content[i + 1];
                    ++i;
                } else {
                    auto it = binding.find(content[i]);
                    answers.push_back(it == binding.end() ? kEosId : it->second);
                }
            }
            tgt.insert(tgt.end(), answers.begin(), answers.end());
            break;
        }
    }
    tgt.push_back(kEosId);
    return tgt;
}

// Binding geometry of a longrange-recall source: for each answer position in
// the target (excluding the BOS/EOS frame), the distance in source tokens
// from the bound value back to its query marker.
struct RecallInfo {
    std::vector<int> answer_tgt_positions;  // indices into tgt (1-based content)
    std::vector<int> binding_distances;
};

inline RecallInfo longrange_recall_info(const std::vector<int>& src,
                                        const TaskSpec& spec) {
    RecallInfo info;
    std::map<int, int> value_pos;  // marker -> source index of its value
    int answer_index = 0;
    for (size_t i = 1; i + 1 < src.size(); ++i) {
        if (!spec.is_marker(src[i])) continue;
        if (i + 1 < src.size() && spec.is_value(src[i + 1])) {
            value_pos[src[i]] = static_cast<int>(i + 1);
            ++i;
        } else {
            ++answer_index;
            auto it = value_pos.find(src[i]);
            if (it != value_pos.end()) {
                info.answer_tgt_positions.push_back(answer_index);
                info.binding_distances.push_back(static_cast<int>(i) - it->second);
            }
        }
    }
    return info;
}

inline Dataset generate(const TaskSpec& spec, Split split) {
    spec.validate();
    const int count = split == Split::Train   ? spec.n_train
                      : split == Split::Valid ? spec.n_valid
                                              : spec.n_test;
    Rng rng(spec.seed, std::string("task.") + to_string(split));
    Dataset ds;
    ds.examples.reserve(count);
    for (int i = 0; i < count; ++i) {
        switch (spec.task) {
            case Task::Copy:
                ds.examples.push_back(detail::make_copy_like(spec, rng, false));
                break;
            case Task::Reverse:
                ds.examples.push_back(detail::make_copy_like(spec, rng, true));
                break;
            case Task::LongrangeRecall:
                ds.examples.push_back(detail::make_longrange(spec, rng));
                break;
        }
    }
    return ds;
}

struct Batch {
    std::vector<std::vector<int>> src;  // padded to the batch max length
    std::vector<std::vector<int>> tgt;
    std::vector<int> src_len;
    std::vector<int> tgt_len;
    int pad_id = kPadId;
};

inline Batch make_batch(const Dataset& ds, const std::vector<int>& indices,
                        int pad_id = kPadId) {
    Batch b;
    b.pad_id = pad_id;
    size_t max_src = 0, max_tgt = 0;
    for (int idx : indices) {
        max_src = std::max(max_src, ds.examples[idx].src.size());
        max_tgt = std::max(max_tgt, ds.examples[idx].tgt.size());
    }
    for (int idx : indices) {
        const Example& ex = ds.examples[idx];
        std::vector<int> s = ex.src;
        std::vector<int> t = ex.tgt;
        b.src_len.push_back(static_cast<int>(s.size()));
        b.tgt_len.push_back(static_cast<int>(t.size()));
        s.resize(max_src, pad_id);
        t.resize(max_tgt, pad_id);
        b.src.push_back(std::move(s));
        b.tgt.push_back(std::move(t));
    }
    return b;
}

inline std::vector<Batch> batch(const Dataset& ds, int batch_size,
                                int pad_id = kPadId) {
    if (batch_size < 1) throw ContractError("batch: batch size must be >= 1");
    std::vector<Batch> batches;
    std::vector<int> indices;
    for (size_t i = 0; i < ds.examples.size(); ++i) {
        indices.push_back(static_cast<int>(i));
        if (static_cast<int>(indices.size()) == batch_size ||
            i + 1 == ds.examples.size()) {
            batches.push_back(make_batch(ds, indices, pad_id));
            indices.clear();
        }
    }
    return batches;
}

// One example per line: source and target as space-separated ids, tab split.
inline void write_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open dataset file for writing: " + path);
    for (const Example& ex : ds.examples) {
        std::ostringstream line;
        for (size_t i = 0; i < ex.src.size(); ++i) {
            if (i) line << ' ';
            line << ex.src[i];
        }
        line << '\t';
        for (size_t i = 0; i < ex.tgt.size(); ++i) {
            if (i) line << ' ';
            line << ex.tgt[i];
        }
        out << line.str() << '\n';
    }
}

inline Dataset read_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open dataset file: " + path);
    Dataset ds;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const size_t tab = line.find('\t');
        if (tab == std::string::npos) {
            throw IoError("dataset line missing tab separator: " + path);
        }
        Example ex;
        std::istringstream ss(line.substr(0, tab));
        int id;
        while (ss >> id) ex.src.push_back(id);
        std::istringstream st(line.substr(tab + 1));
        while (st >> id) ex.tgt.push_back(id);
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

}  // namespace lasformer
