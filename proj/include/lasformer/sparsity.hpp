// Adaptive sparsity control: the per-group k ratio is nudged down while the
// kept positions capture more than a threshold t of the full attention mass,
// and nudged up otherwise, with a hard floor and a latched freeze that stops
// k from climbing back up once it has become small.
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lasformer/attention.hpp"
#include "lasformer/common.hpp"
#include "lasformer/tensor.hpp"

namespace lasformer {

// All selection hyperparameters.
struct SelectionConfig {
    int d_s = 16;                   // selection dimension
    double t = 0.95;                // attention-mass threshold
    double step = 0.002;            // k update increment
    double alpha = 0.01;            // supervision loss weight
    int r = 2;                      // layers per sharing group
    double k_init = 1.0;
    double k_min = 0.01;            // 1% floor
    int min_tokens = 10;            // per-row kept floor
    double freeze_threshold = 0.5;  // increases disabled above this once latched
    bool adaptive = true;           // false pins k at k_init (dense baseline runs)
    bool symmetric_kl = false;      // experimental two-sided supervision

    void validate() const {
        auto fail = [](const std::string& msg) { throw ConfigError("selection: " + msg); };
        if (!(t > 0.0 && t < 1.0)) fail("t must be in (0,1)");
        if (!(step > 0.0)) fail("step must be > 0");
        if (!(k_min > 0.0 && k_min <= k_init && k_init <= 1.0))
            fail("need 0 < k_min <= k_init <= 1");
        if (r < 1) fail("r must be >= 1");
        if (min_tokens < 1) fail("min_tokens must be >= 1");
        if (d_s < 1) fail("d_s must be >= 1");
        if (alpha < 0.0) fail("alpha must be >= 0");
        if (!(freeze_threshold > 0.0 && freeze_threshold <= 1.0))
            fail("freeze_threshold must be in (0,1]");
    }
};

// Live sparsity ratio of one selection group, owned by the group leader.
struct SparsityState {
    double k = 1.0;
    bool frozen_increase = false;
    int layer_index = 0;
    AttnKind kind = AttnKind::EncoderSelf;
};

// One controller update from the captured attention mass of a training step.
inline SparsityState update_k(SparsityState state, double captured,
                              const SelectionConfig& config) {
    if (!(captured >= 0.0 && captured <= 1.0 + 1e-12)) {
        throw ContractError("update_k: captured_mass " + std::to_string(captured) +
                            " outside [0,1]");
    }
    if (captured > config.t) {
        state.k = std::max(state.k - config.step, config.k_min);
    } else if (!(state.frozen_increase && state.k > config.freeze_threshold)) {
        state.k = std::min(state.k + config.step, 1.0);
    }
    // Latch: once k has been below the threshold, it may never climb past it.
    if (state.k < config.freeze_threshold) state.frozen_increase = true;
    return state;
}

// Mean over query rows of the full-attention mass falling on kept positions.
inline double captured_mass(const Tensor& A, const Tensor& mask) {
    check_same_shape(A, mask, "captured_mass");
    const int nq = A.rows(), nk = A.cols();
    const auto& av = A.values();
    const auto& mv = mask.values();
    double sum = 0.0;
    for (int i = 0; i < nq; ++i) {
        const size_t base = static_cast<size_t>(i) * nk;
        for (int j = 0; j < nk; ++j) sum += av[base + j] * mv[base + j];
    }
    return sum / nq;
}

// Variant restricted to valid (non-pad) query rows.
inline double captured_mass_rows(const Tensor& A, const Tensor& mask,
                                 const std::vector<std::uint8_t>& row_valid) {
    check_same_shape(A, mask, "captured_mass");
    const int nq = A.rows(), nk = A.cols();
    const auto& av = A.values();
    const auto& mv = mask.values();
    double sum = 0.0;
    int rows = 0;
    for (int i = 0; i < nq; ++i) {
        if (!row_valid.empty() && row_valid[static_cast<size_t>(i)] == 0) continue;
        const size_t base = static_cast<size_t>(i) * nk;
        for (int j = 0; j < nk; ++j) sum += av[base + j] * mv[base + j];
        ++rows;
    }
    if (rows == 0) throw ContractError("captured_mass: no valid query rows");
    return sum / rows;
}

// Lowest-indexed layer of i's sharing group.
inline int group_leader(int layer_index, int r) {
    if (r < 1) throw ContractError("group_leader: r must be >= 1");
    if (layer_index < 0) throw ContractError("group_leader: negative layer index");
    return (layer_index / r) * r;
}

struct SparsityReportEntry {
    AttnKind kind;
    int leader_layer;
    double mean_kept_fraction;  // realized sparsity
    long long rows_counted;
};

struct SparsityReport {
    std::vector<SparsityReportEntry> entries;

    double entry(AttnKind kind, int leader) const {
        for (const auto& e : entries)
            if (e.kind == kind && e.leader_layer == leader)
                return e.mean_kept_fraction;
        throw InputError("sparsity report: no entry for kind/layer");
    }
};

// Realized per-module sparsity: mean kept fraction of admissible positions,
// grouped by attention kind and leader layer.
inline SparsityReport sparsity_report(const std::vector<AttentionRecord>& records,
                                      int r) {
    if (records.empty()) {
        throw ContractError("sparsity_report: no attention records");
    }
    struct Acc {
        double frac_sum = 0.0;
        long long rows = 0;
    };
    std::map<std::pair<int, int>, Acc> acc;  // (kind, leader) -> acc
    for (const auto& rec : records) {
        const int leader = group_leader(rec.layer_index, r);
        Acc& a = acc[{static_cast<int>(rec.kind), leader}];
        const int nq = rec.mask.rows(), nk = rec.mask.cols();
        const auto& mv = rec.mask.values();
        const auto& fv = rec.full_attention.values();
        for (int i = 0; i < nq; ++i) {
            if (!rec.row_counted(i)) continue;
            const size_t base = static_cast<size_t>(i) * nk;
            int kept = 0, adm = 0;
            for (int j = 0; j < nk; ++j) {
                // Admissible positions are those the full attention could
                // reach; its masked entries are exactly zero.
                if (fv[base + j] > 0.0 || mv[base + j] > 0.5) ++adm;
                if (mv[base + j] > 0.5) ++kept;
            }
            if (adm == 0) continue;
            a.frac_sum += double(kept) / adm;
            a.rows += 1;
        }
    }
    SparsityReport report;
    for (const auto& [key, a] : acc) {
        report.entries.push_back({static_cast<AttnKind>(key.first), key.second,
                                  a.rows > 0 ? a.frac_sum / a.rows : 0.0,
                                  a.rows});
    }
    return report;
}

}  // namespace lasformer
