// Full scaled dot-product attention, the low-dimensional selection attention,
// top-k masking with straight-through re-parameterization, and the
// gather-based sparse inference kernel.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "lasformer/common.hpp"
#include "lasformer/tensor.hpp"

namespace lasformer {

enum class AttnKind { EncoderSelf, Cross, DecoderSelf };

inline const char* to_string(AttnKind kind) {
    switch (kind) {
        case AttnKind::EncoderSelf: return "encoder-self";
        case AttnKind::Cross: return "cross";
        case AttnKind::DecoderSelf: return "decoder-self";
    }
    return "?";
}

inline AttnKind attn_kind_from_string(const std::string& s) {
    if (s == "encoder-self") return AttnKind::EncoderSelf;
    if (s == "cross") return AttnKind::Cross;
    if (s == "decoder-self") return AttnKind::DecoderSelf;
    throw InputError("unknown attention kind: " + s);
}

// Task-imposed admissibility: causal triangle for decoder self-attention and
// padding exclusion everywhere. Applied before any learned selection.
struct StructuralMask {
    int n_q = 0;
    int n_k = 0;
    std::vector<std::uint8_t> admissible;  // row-major

    static StructuralMask all(int nq, int nk) {
        StructuralMask m;
        m.n_q = nq;
        m.n_k = nk;
        m.admissible.assign(static_cast<size_t>(nq) * nk, 1);
        return m;
    }

    static StructuralMask build(AttnKind kind, int nq, int nk,
                                const std::vector<bool>* key_is_pad = nullptr) {
        if (kind == AttnKind::DecoderSelf && nq != nk) {
            throw ShapeError("decoder-self mask requires square shape, got " +
                             std::to_string(nq) + "x" + std::to_string(nk));
        }
        StructuralMask m = all(nq, nk);
        for (int i = 0; i < nq; ++i) {
            for (int j = 0; j < nk; ++j) {
                bool adm = true;
                if (kind == AttnKind::DecoderSelf && j > i) adm = false;
                if (key_is_pad != nullptr && (*key_is_pad)[j]) adm = false;
                m.admissible[static_cast<size_t>(i) * nk + j] = adm ? 1 : 0;
            }
        }
        return m;
    }

    bool at(int i, int j) const {
        return admissible[static_cast<size_t>(i) * n_k + j] != 0;
    }
    int admissible_in_row(int i) const {
        int c = 0;
        for (int j = 0; j < n_k; ++j) c += at(i, j) ? 1 : 0;
        return c;
    }
    long long admissible_pairs() const {
        long long c = 0;
        for (std::uint8_t a : admissible) c += a;
        return c;
    }

    // Constant additive-logit tensor: 0 where admissible, sentinel elsewhere.
    Tensor additive() const {
        std::vector<double> v(admissible.size());
        for (size_t i = 0; i < v.size(); ++i)
            v[i] = admissible[i] ? 0.0 : kMaskedLogit;
        return Tensor::from_values({n_q, n_k}, std::move(v));
    }
};

// Low-dimensional projection pair used to rank keys per query.
struct SelectionLayer {
    Tensor w_q;  // [d, d_s]
    Tensor w_k;  // [d, d_s]
    int d_s = 0;
};

struct AttentionResult {
    Tensor output;
    Tensor weights;
};

// Dense scaled dot-product attention; logits scaled by 1/sqrt(d).
inline AttentionResult full_attention(const Tensor& Q, const Tensor& K,
                                      const Tensor& V,
                                      const StructuralMask* structural = nullptr) {
    const int d = Q.cols();
    if (K.cols() != d) {
        throw ShapeError("full_attention: Q " + shape_str(Q.shape()) +
                         " and K " + shape_str(K.shape()) +
                         " disagree on inner dimension");
    }
    Tensor logits = scale(matmul_nt(Q, K, "attn.logits"), 1.0 / std::sqrt(double(d)));
    Tensor weights;
    if (structural != nullptr) {
        Tensor additive = structural->additive();
        weights = softmax_rows(add(logits, additive));
    } else {
        weights = softmax_rows(logits);
    }
    Tensor out = matmul(weights, V, "attn.weighted_sum");
    return {out, weights};
}

// Lightweight selection attention: project both sides to d_s, then a
// single-headed softmax over admissible positions.
inline Tensor selection_scores(const Tensor& X_q, const Tensor& X_k,
                               const SelectionLayer& layer,
                               const StructuralMask* structural = nullptr) {
    if (layer.w_q.rows() != X_q.cols() || layer.w_k.rows() != X_k.cols()) {
        throw ShapeError("selection_scores: weights " +
                         shape_str(layer.w_q.shape()) +
                         " incompatible with input width " +
                         std::to_string(X_q.cols()));
    }
    Tensor q_s = matmul(X_q, layer.w_q, "select.proj");
    Tensor k_s = matmul(X_k, layer.w_k, "select.proj");
    Tensor logits = scale(matmul_nt(q_s, k_s, "select.logits"),
                          1.0 / std::sqrt(double(layer.d_s)));
    if (structural != nullptr) {
        Tensor additive = structural->additive();
        return softmax_rows(add(logits, additive));
    }
    return softmax_rows(logits);
}

// Kept-count clamp: ceil(k * n_adm), floored by min(min_tokens, n_adm),
// capped at n_adm. The epsilon guards against float round-up of exact
// integer products.
inline int kept_count(double k_ratio, int min_tokens, int n_adm) {
    if (n_adm <= 0) return 0;
    int target = static_cast<int>(std::ceil(k_ratio * n_adm - 1e-9));
    target = std::max(target, std::min(min_tokens, n_adm));
    target = std::min(target, n_adm);
    return target;
}

// Binary mask keeping, per query row, the admissible positions with the
// largest selection scores. Ties break toward the lowest key index.
inline Tensor topk_mask(const Tensor& A_s, double k_ratio, int min_tokens,
                        const StructuralMask& structural) {
    if (k_ratio <= 0.0 || k_ratio > 1.0) {
        throw ContractError("topk_mask: k_ratio must be in (0,1], got " +
                            std::to_string(k_ratio));
    }
    const int nq = A_s.rows(), nk = A_s.cols();
    if (nq != structural.n_q || nk != structural.n_k) {
        throw ShapeError("topk_mask: scores " + shape_str(A_s.shape()) +
                         " vs structural mask " + std::to_string(structural.n_q) +
                         "x" + std::to_string(structural.n_k));
    }
    std::vector<double> mask(static_cast<size_t>(nq) * nk, 0.0);
    std::vector<int> idx;
    idx.reserve(nk);
    const auto& sv = A_s.values();
    for (int i = 0; i < nq; ++i) {
        idx.clear();
        for (int j = 0; j < nk; ++j)
            if (structural.at(i, j)) idx.push_back(j);
        const int n_adm = static_cast<int>(idx.size());
        const int keep = kept_count(k_ratio, min_tokens, n_adm);
        const size_t base = static_cast<size_t>(i) * nk;
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
            return sv[base + a] > sv[base + b];
        });
        for (int r = 0; r < keep; ++r) mask[base + idx[r]] = 1.0;
    }
    return Tensor::from_values({nq, nk}, std::move(mask));
}

// Re-parameter trick: forward values are bit-equal to the hard mask, the
// backward pass routes the incoming gradient to A_s unchanged (identity),
// and nothing flows through the top-k itself.
inline Tensor straight_through(const Tensor& mask, const Tensor& a_s) {
    check_same_shape(mask, a_s, "straight_through");
    std::vector<double> out(mask.values());
    return make_op(mask.shape(), std::move(out), {a_s}, [](TensorNode& self) {
        TensorNode& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    });
}

// Additive logit gate from a {0,1} mask (hard or straight-through): 0 at kept
// positions, the masked-logit sentinel elsewhere, so gating plus softmax is
// bit-equal to hard sentinel masking. The derivative of log(x) clamped to
// [eps,1] is 1 at x=1 and 0 in the clamped region, so gradient reaches the
// mask input only at kept positions.
inline Tensor log_mask_gate(const Tensor& mask_like) {
    std::vector<double> out(mask_like.values().size());
    const auto& mv = mask_like.values();
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = mv[i] > 0.5 ? 0.0 : kMaskedLogit;
    return make_op(mask_like.shape(), std::move(out), {mask_like},
                   [](TensorNode& self) {
                       TensorNode& pm = *self.parents[0];
                       if (!pm.requires_grad) return;
                       pm.ensure_grad();
                       for (size_t i = 0; i < self.grad.size(); ++i)
                           if (pm.values[i] > 0.5) pm.grad[i] += self.grad[i];
                   });
}

enum class AttnPath { Train, Infer };

// Masked attention over kept positions only. Train path computes dense
// logits and gates them with the sentinel before softmax; infer path gathers
// kept positions and computes nothing else, charging the counter with
// roughly 2*(kept total)*d instead of 2*Nq*Nk*d. Both paths produce
// identical outputs.
inline AttentionResult selective_attention(const Tensor& Q, const Tensor& K,
                                           const Tensor& V, const Tensor& mask,
                                           AttnPath path,
                                           const StructuralMask* structural = nullptr) {
    const int d = Q.cols();
    const int nq = Q.rows(), nk = K.rows();
    if (mask.rows() != nq || mask.cols() != nk) {
        throw ShapeError("selective_attention: mask " + shape_str(mask.shape()) +
                         " vs logits " + std::to_string(nq) + "x" +
                         std::to_string(nk));
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(double(d));
    if (path == AttnPath::Train) {
        Tensor logits = scale(matmul_nt(Q, K, "attn.logits"), inv_sqrt_d);
        if (structural != nullptr) {
            Tensor additive = structural->additive();
            logits = add(logits, additive);
        }
        Tensor gated = add(logits, log_mask_gate(mask));
        Tensor weights = softmax_rows(gated);
        Tensor out = matmul(weights, V, "attn.weighted_sum");
        return {out, weights};
    }

    // Gather path: only kept positions' logits and weighted sums exist.
    const int dv = V.cols();
    const auto& qv = Q.values();
    const auto& kv = K.values();
    const auto& vv = V.values();
    const auto& mv = mask.values();
    std::vector<double> out(static_cast<size_t>(nq) * dv, 0.0);
    std::vector<double> wdense(static_cast<size_t>(nq) * nk, 0.0);
    std::vector<int> kept;
    std::vector<double> logits_row;
    std::uint64_t mac_logits = 0, mac_wsum = 0;
    for (int i = 0; i < nq; ++i) {
        kept.clear();
        const size_t mbase = static_cast<size_t>(i) * nk;
        for (int j = 0; j < nk; ++j)
            if (mv[mbase + j] > 0.5) kept.push_back(j);
        if (kept.empty()) {
            throw DegenerateRowError("selective_attention: query row " +
                                     std::to_string(i) + " keeps no positions");
        }
        logits_row.resize(kept.size());
        const double* qrow = qv.data() + static_cast<size_t>(i) * d;
        double rowmax = -std::numeric_limits<double>::infinity();
        for (size_t r = 0; r < kept.size(); ++r) {
            const double* krow = kv.data() + static_cast<size_t>(kept[r]) * d;
            double s = 0.0;
            for (int c = 0; c < d; ++c) s += qrow[c] * krow[c];
            s *= inv_sqrt_d;
            logits_row[r] = s;
            rowmax = std::max(rowmax, s);
        }
        double denom = 0.0;
        for (double& s : logits_row) {
            s = std::exp(s - rowmax);
            denom += s;
        }
        const double inv_denom = 1.0 / denom;
        double* orow = out.data() + static_cast<size_t>(i) * dv;
        for (size_t r = 0; r < kept.size(); ++r) {
            const double w = logits_row[r] * inv_denom;
            wdense[mbase + kept[r]] = w;
            const double* vrow = vv.data() + static_cast<size_t>(kept[r]) * dv;
            for (int c = 0; c < dv; ++c) orow[c] += w * vrow[c];
        }
        mac_logits += kept.size() * static_cast<std::uint64_t>(d);
        mac_wsum += kept.size() * static_cast<std::uint64_t>(dv);
    }
    count_macs("attn.logits", mac_logits);
    count_macs("attn.weighted_sum", mac_wsum);
    return {Tensor::from_values({nq, dv}, std::move(out)),
            Tensor::from_values({nq, nk}, std::move(wdense))};
}

// Window mask centered on the query; for cross-attention the center maps the
// query position proportionally onto key positions. If intersecting with the
// structural mask empties a row, the admissible position nearest the center
// is kept so no row degenerates.
inline Tensor fixed_window_mask(int n_q, int n_k, int window_length,
                                AttnKind kind,
                                const StructuralMask* structural = nullptr) {
    if (window_length < 1) {
        throw ContractError("fixed_window_mask: window_length must be >= 1");
    }
    std::vector<double> mask(static_cast<size_t>(n_q) * n_k, 0.0);
    const double half = window_length / 2.0;
    for (int i = 0; i < n_q; ++i) {
        const double center =
            (kind == AttnKind::Cross)
                ? (n_q > 1 ? double(i) * (n_k - 1) / (n_q - 1) : (n_k - 1) / 2.0)
                : double(i);
        const size_t base = static_cast<size_t>(i) * n_k;
        bool any = false;
        for (int j = 0; j < n_k; ++j) {
            if (std::fabs(center - j) > half) continue;
            if (kind == AttnKind::DecoderSelf && j > i) continue;
            if (structural != nullptr && !structural->at(i, j)) continue;
            mask[base + j] = 1.0;
            any = true;
        }
        if (!any) {
            int best = -1;
            double best_dist = std::numeric_limits<double>::infinity();
            for (int j = 0; j < n_k; ++j) {
                if (kind == AttnKind::DecoderSelf && j > i) continue;
                if (structural != nullptr && !structural->at(i, j)) continue;
                const double dist = std::fabs(center - j);
                if (dist < best_dist) {
                    best_dist = dist;
                    best = j;
                }
            }
            if (best >= 0) mask[base + best] = 1.0;
        }
    }
    return Tensor::from_values({n_q, n_k}, std::move(mask));
}

// One attention site's captured state: the full attention (head-pooled),
// the selection attention, and the binary mask actually applied.
struct AttentionRecord {
    AttnKind kind = AttnKind::EncoderSelf;
    int layer_index = 0;
    Tensor full_attention;
    Tensor selection_attention;
    Tensor mask;
    // Query rows that correspond to real (non-pad) tokens; used when
    // aggregating statistics. Empty means all rows count.
    std::vector<std::uint8_t> query_valid;

    bool row_counted(int i) const {
        return query_valid.empty() || query_valid[static_cast<size_t>(i)] != 0;
    }
};

inline nlohmann::json record_to_json(const AttentionRecord& rec) {
    auto matrix = [](const Tensor& t) {
        nlohmann::json rows = nlohmann::json::array();
        for (int i = 0; i < t.rows(); ++i) {
            nlohmann::json row = nlohmann::json::array();
            for (int j = 0; j < t.cols(); ++j) row.push_back(t.at(i, j));
            rows.push_back(std::move(row));
        }
        return rows;
    };
    nlohmann::json j;
    j["kind"] = to_string(rec.kind);
    j["layer_index"] = rec.layer_index;
    j["rows"] = rec.full_attention.rows();
    j["cols"] = rec.full_attention.cols();
    j["full_attention"] = matrix(rec.full_attention);
    j["selection_attention"] = matrix(rec.selection_attention);
    j["mask"] = matrix(rec.mask);
    return j;
}

}  // namespace lasformer
