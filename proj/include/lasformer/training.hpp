// Training loop: one gradient step on the combined loss, then one controller
// update per selection group from the batch-averaged captured mass.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lasformer/data.hpp"
#include "lasformer/model.hpp"
#include "lasformer/objective.hpp"
#include "lasformer/optimizer.hpp"

namespace lasformer {

struct SparsityTrajectoryRow {
    long long step;
    AttnKind kind;
    int leader_layer;
    double k;
    double captured_mass;
};

struct TrainStepResult {
    LossBreakdown loss;
    std::vector<SparsityTrajectoryRow> trajectory;
};

// Teacher-forced inputs/targets for one padded batch row.
struct TeacherForced {
    std::vector<int> tgt_in;   // tgt[0..T-2]
    std::vector<int> targets;  // tgt[1..T-1]
    int in_len;                // real (non-pad) input length
};

inline TeacherForced teacher_forced(const std::vector<int>& tgt, int tgt_len) {
    if (tgt_len < 2) throw InputError("target too short for teacher forcing");
    TeacherForced tf;
    tf.tgt_in.assign(tgt.begin(), tgt.end() - 1);
    tf.targets.assign(tgt.begin() + 1, tgt.end());
    tf.in_len = tgt_len - 1;
    return tf;
}

inline TrainStepResult train_step(Model& model, Adam& optimizer,
                                  const Batch& batch, long long step_index) {
    const ModelConfig& cfg = model.config();
    Rng dropout_rng(cfg.seed, "dropout", static_cast<std::uint64_t>(step_index));

    ForwardOptions opts;
    opts.path = AttnPath::Train;
    opts.dropout_on = cfg.dropout > 0.0;
    opts.dropout_rng = &dropout_rng;
    opts.want_mass = model.uses_selection() && cfg.selection.adaptive;
    opts.want_supervision =
        model.uses_selection() &&
        (cfg.selection.alpha > 0.0 || cfg.selection.symmetric_kl);

    const int B = static_cast<int>(batch.src.size());
    long long total_tokens = 0;
    std::vector<TeacherForced> tf(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
        tf[b] = teacher_forced(batch.tgt[b], batch.tgt_len[b]);
        total_tokens += tf[b].in_len;
    }

    Tensor ce_total;
    Tensor sup_total;
    int sup_terms = 0;
    std::map<GroupKey, MassAccum> mass;
    // Per-site supervision values for reporting even when alpha == 0.
    double sup_report = 0.0;
    int sup_report_terms = 0;

    const bool report_sup = model.uses_selection() && !cfg.fixed_window;
    ForwardOptions fwd_opts = opts;
    fwd_opts.want_supervision = opts.want_supervision || report_sup;

    for (int b = 0; b < B; ++b) {
        ForwardResult res = model.forward(batch.src[b], batch.src_len[b],
                                          tf[b].tgt_in, tf[b].in_len, fwd_opts);
        std::vector<bool> counted(tf[b].targets.size());
        for (size_t i = 0; i < counted.size(); ++i)
            counted[i] = static_cast<int>(i) < tf[b].in_len;
        Tensor ce = cross_entropy_rows(res.logits, tf[b].targets, counted);
        Tensor weighted = scale(ce, double(tf[b].in_len) / double(total_tokens));
        ce_total = ce_total.defined() ? add(ce_total, weighted) : weighted;
        if (res.supervision.defined()) {
            sup_report += res.supervision.scalar_value();
            ++sup_report_terms;
            if (opts.want_supervision) {
                sup_total = sup_total.defined() ? add(sup_total, res.supervision)
                                                : res.supervision;
                ++sup_terms;
            }
        }
        for (const auto& [key, acc] : res.mass) {
            mass[key].sum += acc.mean();
            mass[key].count += 1;
        }
    }

    if (sup_terms > 0) sup_total = scale(sup_total, 1.0 / sup_terms);
    Tensor sup_for_loss =
        opts.want_supervision && sup_total.defined() ? sup_total : Tensor();
    const double alpha = model.uses_selection() ? cfg.selection.alpha : 0.0;
    CombinedLoss combined = combined_loss(ce_total, sup_for_loss, alpha);
    if (!sup_for_loss.defined() && sup_report_terms > 0) {
        combined.breakdown.supervision_loss = sup_report / sup_report_terms;
        combined.breakdown.total = combined.breakdown.nmt_loss +
                                   alpha * combined.breakdown.supervision_loss;
    }

    if (!std::isfinite(combined.breakdown.total)) {
        throw DivergenceError("training loss is not finite at step " +
                                  std::to_string(step_index),
                              step_index);
    }

    model.zero_grads();
    backward(combined.total);
    optimizer.step(model.param_order(), model.params());

    TrainStepResult out;
    out.loss = combined.breakdown;
    if (opts.want_mass) {
        for (auto& [key, state] : model.sparsity_states()) {
            auto it = mass.find(key);
            if (it == mass.end()) continue;
            const double m = it->second.mean();
            state = update_k(state, m, cfg.selection);
            out.trajectory.push_back({step_index, static_cast<AttnKind>(key.first),
                                      key.second, state.k, m});
        }
    }
    return out;
}

// Deterministic batch sampling: indices at a given step depend only on the
// seed and the step, so resumed runs replay the same batch order.
inline std::vector<int> sample_batch_indices(std::uint64_t seed,
                                             long long step_index,
                                             int dataset_size, int batch_size) {
    Rng rng(seed, "batch", static_cast<std::uint64_t>(step_index));
    std::vector<int> idx(static_cast<size_t>(batch_size));
    for (int& i : idx) i = rng.uniform_int(0, dataset_size - 1);
    return idx;
}

}  // namespace lasformer
