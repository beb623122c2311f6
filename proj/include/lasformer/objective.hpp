// Losses: token cross-entropy, the attention-supervision KL pulling the
// selection distribution toward the full attention, and their weighted sum.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "lasformer/common.hpp"
#include "lasformer/tensor.hpp"

namespace lasformer {

struct LossBreakdown {
    double nmt_loss = 0.0;          // mean token cross-entropy, nats
    double supervision_loss = 0.0;  // mean KL over query rows, nats
    double total = 0.0;
    double alpha = 0.0;
};

namespace detail {
inline constexpr double kKlClamp = 1e-12;
}

// Mean over query rows of KL(target || student). The target is a fixed
// constant (teacher detached); student entries are clamped below at 1e-12
// inside the log, and target zeros contribute nothing. Rows where
// row_valid is 0 are skipped; an empty row_valid counts every row.
inline Tensor kl_attention_loss(const Tensor& student, const Tensor& target,
                                const std::vector<std::uint8_t>& row_valid = {}) {
    check_same_shape(student, target, "kl_attention_loss");
    const int nq = student.rows(), nk = student.cols();
    const auto& sv = student.values();
    const auto& tv = target.values();
    if (!row_valid.empty() && static_cast<int>(row_valid.size()) != nq) {
        throw ShapeError("kl_attention_loss: row_valid length mismatch");
    }
    double loss = 0.0;
    int rows = 0;
    for (int i = 0; i < nq; ++i) {
        if (!row_valid.empty() && row_valid[static_cast<size_t>(i)] == 0) continue;
        const size_t base = static_cast<size_t>(i) * nk;
        for (int j = 0; j < nk; ++j) {
            const double t = tv[base + j];
            if (t <= 0.0) continue;
            const double s = std::max(sv[base + j], detail::kKlClamp);
            loss += t * (std::log(t) - std::log(s));
        }
        ++rows;
    }
    if (rows == 0) throw ContractError("kl_attention_loss: no valid query rows");
    loss /= rows;
    const std::vector<std::uint8_t> rv = row_valid;
    return make_op({1}, {loss}, {student},
                   [nq, nk, tv = target.values(), rv, rows](TensorNode& self) {
                       TensorNode& ps = *self.parents[0];
                       if (!ps.requires_grad) return;
                       ps.ensure_grad();
                       const double g = self.grad[0] / rows;
                       for (int i = 0; i < nq; ++i) {
                           if (!rv.empty() && rv[static_cast<size_t>(i)] == 0)
                               continue;
                           const size_t base = static_cast<size_t>(i) * nk;
                           for (int j = 0; j < nk; ++j) {
                               const double t = tv[base + j];
                               if (t <= 0.0) continue;
                               if (ps.values[base + j] <= detail::kKlClamp)
                                   continue;  // clamped region: zero slope
                               ps.grad[base + j] -= g * t / ps.values[base + j];
                           }
                       }
                   });
}

// Mean token-level cross-entropy in nats over non-pad target positions.
inline Tensor nmt_loss(const Tensor& logits, const std::vector<int>& targets,
                       int pad_id) {
    std::vector<bool> counted(targets.size());
    for (size_t i = 0; i < targets.size(); ++i) counted[i] = targets[i] != pad_id;
    return cross_entropy_rows(logits, targets, counted);
}

struct CombinedLoss {
    Tensor total;  // graph tensor for backward
    LossBreakdown breakdown;
};

// Loss = nmt + alpha * supervision. The breakdown holds the exact doubles.
inline CombinedLoss combined_loss(const Tensor& nmt, const Tensor& supervision,
                                  double alpha) {
    if (alpha < 0.0) throw ContractError("combined_loss: alpha must be >= 0");
    LossBreakdown b;
    b.nmt_loss = nmt.scalar_value();
    b.supervision_loss = supervision.defined() ? supervision.scalar_value() : 0.0;
    b.alpha = alpha;
    b.total = b.nmt_loss + alpha * b.supervision_loss;
    Tensor total = (supervision.defined() && alpha > 0.0)
                       ? add(nmt, scale(supervision, alpha))
                       : nmt;
    return {total, b};
}

}  // namespace lasformer
