// Encoder-decoder transformer in which every attention site (encoder self,
// cross, decoder self) is wrapped with a selection layer, group sharing of
// masks, supervision capture, and the adaptive-k controller. Pre-layer-norm
// blocks; selection layers see the same normalized input that feeds the
// gated attention's Q/K projections.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "lasformer/attention.hpp"
#include "lasformer/common.hpp"
#include "lasformer/cost_model.hpp"
#include "lasformer/data.hpp"
#include "lasformer/objective.hpp"
#include "lasformer/op_counter.hpp"
#include "lasformer/optimizer.hpp"
#include "lasformer/rng.hpp"
#include "lasformer/sparsity.hpp"
#include "lasformer/tensor.hpp"

namespace lasformer {

struct ModelConfig {
    int n_layers = 2;  // encoder and decoder depth
    int d = 64;
    int heads = 4;
    int ffn_dim = 128;
    int vocab_size = 64;
    int max_len = 256;
    double dropout = 0.1;
    std::uint64_t seed = 42;
    SelectionConfig selection;
    bool selection_enabled = true;  // false: plain dense transformer
    bool use_reparam = true;        // straight-through path
    bool fixed_window = false;      // replace top-k with a window pattern
    int window_length = 0;          // 0: max(3, 20*max_len/1000)

    int head_dim() const { return d / heads; }
    int effective_window() const {
        if (window_length > 0) return window_length;
        return std::max(3, (20 * max_len) / 1000);
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("model: " + m); };
        if (n_layers < 1) fail("n_layers must be >= 1");
        if (d < 1 || heads < 1 || d % heads != 0) fail("d must divide by heads");
        if (ffn_dim < 1) fail("ffn_dim must be >= 1");
        if (vocab_size < kFirstContentId + 1) fail("vocab too small");
        if (max_len < 4) fail("max_len must be >= 4");
        if (dropout < 0.0 || dropout >= 1.0) fail("dropout must be in [0,1)");
        if (selection_enabled && !fixed_window) {
            selection.validate();
            if (selection.d_s > d) fail("selection d_s must be <= d");
            if (n_layers % selection.r != 0) fail("selection.r must divide n_layers");
        }
    }
};

// Records stop-gradient buffers (top-k masks, detached teachers) on a first
// pass and replays them on later passes, so finite-difference probes see a
// fixed mask regime while every differentiable path stays live.
struct FreezeTape {
    bool replay = false;
    size_t cursor = 0;
    std::vector<std::vector<double>> buffers;

    std::vector<double> next(std::vector<double> fresh) {
        if (!replay) {
            buffers.push_back(fresh);
            return fresh;
        }
        if (cursor >= buffers.size()) {
            throw ContractError("freeze tape exhausted; forward structure changed");
        }
        return buffers[cursor++];
    }
    void rewind() { cursor = 0; }
};

struct ForwardOptions {
    AttnPath path = AttnPath::Train;
    bool dropout_on = false;
    Rng* dropout_rng = nullptr;
    bool capture_records = false;
    bool want_mass = false;
    bool want_supervision = false;
    FreezeTape* tape = nullptr;
    std::vector<SiteCost>* site_costs = nullptr;
};

struct MassAccum {
    double sum = 0.0;
    long long count = 0;
    double mean() const { return count > 0 ? sum / count : 0.0; }
};

using GroupKey = std::pair<int, int>;  // (kind as int, leader layer)

struct ForwardResult {
    Tensor logits;       // [T_in, vocab]; row i predicts target position i+1
    Tensor supervision;  // scalar graph tensor; undefined when not requested
    std::vector<AttentionRecord> records;
    std::map<GroupKey, MassAccum> mass;
};

namespace detail {

inline std::vector<double> softmax_values_rows(const std::vector<double>& x,
                                               int nq, int nk) {
    std::vector<double> out(x.size());
    for (int i = 0; i < nq; ++i) {
        const size_t base = static_cast<size_t>(i) * nk;
        double rowmax = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < nk; ++j) rowmax = std::max(rowmax, x[base + j]);
        if (rowmax <= kMaskedThreshold) {
            throw DegenerateRowError("softmax: fully masked row " + std::to_string(i));
        }
        double denom = 0.0;
        for (int j = 0; j < nk; ++j) {
            const double e = std::exp(x[base + j] - rowmax);
            out[base + j] = e;
            denom += e;
        }
        const double inv = 1.0 / denom;
        for (int j = 0; j < nk; ++j) out[base + j] *= inv;
    }
    return out;
}

// Uniform distribution over kept positions, used as the stand-in selection
// attention of pattern-based (fixed-window) masks.
inline std::vector<double> normalized_mask_rows(const std::vector<double>& mask,
                                                int nq, int nk) {
    std::vector<double> out(mask.size(), 0.0);
    for (int i = 0; i < nq; ++i) {
        const size_t base = static_cast<size_t>(i) * nk;
        double kept = 0.0;
        for (int j = 0; j < nk; ++j) kept += mask[base + j] > 0.5 ? 1.0 : 0.0;
        if (kept == 0.0) continue;
        for (int j = 0; j < nk; ++j)
            if (mask[base + j] > 0.5) out[base + j] = 1.0 / kept;
    }
    return out;
}

}  // namespace detail

class Model {
public:
    explicit Model(const ModelConfig& config) : cfg_(config) {
        cfg_.validate();
        build_params();
        build_states();
        build_positional();
    }

    const ModelConfig& config() const { return cfg_; }
    ModelConfig& mutable_config() { return cfg_; }

    const std::vector<std::string>& param_order() const { return param_order_; }
    std::map<std::string, Tensor>& params() { return params_; }
    const std::map<std::string, Tensor>& params() const { return params_; }
    Tensor& param(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw InputError("no parameter named " + name);
        return it->second;
    }
    // Temporarily swaps a parameter handle (gradient-check hook).
    Tensor swap_param(const std::string& name, Tensor replacement) {
        Tensor old = param(name);
        params_[name] = std::move(replacement);
        return old;
    }

    std::map<GroupKey, SparsityState>& sparsity_states() { return states_; }
    const std::map<GroupKey, SparsityState>& sparsity_states() const {
        return states_;
    }
    double state_k(AttnKind kind, int leader) const {
        auto it = states_.find({static_cast<int>(kind), leader});
        return it == states_.end() ? 1.0 : it->second.k;
    }

    void zero_grads() {
        for (auto& [name, p] : params_) p.zero_grad();
    }

    bool uses_selection() const { return cfg_.selection_enabled && !cfg_.fixed_window; }

    // ------------------------------------------------------------------
    // Forward passes
    // ------------------------------------------------------------------

    // Teacher-forced forward over one (possibly padded) example.
    ForwardResult forward(const std::vector<int>& src, int src_len,
                          const std::vector<int>& tgt_in, int tgt_in_len,
                          const ForwardOptions& opts) {
        check_tokens(src, src_len);
        check_tokens(tgt_in, tgt_in_len);
        std::unique_ptr<NoGradScope> no_grad;
        if (opts.path == AttnPath::Infer) no_grad = std::make_unique<NoGradScope>();

        Accum acc(opts);
        GroupCache groups;
        Tensor enc_out = encode_block(src, src_len, opts, acc, groups);

        const int T = static_cast<int>(tgt_in.size());
        std::vector<bool> tgt_pad(T);
        for (int i = 0; i < T; ++i) tgt_pad[i] = i >= tgt_in_len;
        std::vector<std::uint8_t> tgt_valid(T);
        for (int i = 0; i < T; ++i) tgt_valid[i] = tgt_pad[i] ? 0 : 1;

        const int S = static_cast<int>(src.size());
        std::vector<bool> src_pad(S);
        for (int j = 0; j < S; ++j) src_pad[j] = j >= src_len;

        Tensor x = embed(tgt_in, "tgt_emb", opts);
        const StructuralMask self_mask =
            StructuralMask::build(AttnKind::DecoderSelf, T, T, &tgt_pad);
        const StructuralMask cross_mask =
            StructuralMask::build(AttnKind::Cross, T, S, &src_pad);

        for (int layer = 0; layer < cfg_.n_layers; ++layer) {
            const std::string lp = "dec." + std::to_string(layer);
            Tensor h1 = layer_norm_rows(x, param(lp + ".ln1.g"), param(lp + ".ln1.b"));
            Tensor self_out =
                attention_site(AttnKind::DecoderSelf, layer, lp + ".self",
                               lp + ".self_sel", h1, h1, self_mask, tgt_valid,
                               opts, acc, groups);
            x = add(x, maybe_dropout(self_out, opts));

            Tensor h2 = layer_norm_rows(x, param(lp + ".ln2.g"), param(lp + ".ln2.b"));
            Tensor cross_out =
                attention_site(AttnKind::Cross, layer, lp + ".cross",
                               lp + ".cross_sel", h2, enc_out, cross_mask,
                               tgt_valid, opts, acc, groups);
            x = add(x, maybe_dropout(cross_out, opts));

            Tensor h3 = layer_norm_rows(x, param(lp + ".ln3.g"), param(lp + ".ln3.b"));
            x = add(x, maybe_dropout(ffn_block(h3, lp), opts));
        }
        Tensor dec_out =
            layer_norm_rows(x, param("dec.final_ln.g"), param("dec.final_ln.b"));
        Tensor logits = matmul(dec_out, param("out_w"), "logits.vocab");

        ForwardResult result;
        result.logits = logits;
        result.records = std::move(acc.records);
        result.mass = std::move(acc.mass);
        if (!acc.kl_terms.empty()) {
            Tensor sum = acc.kl_terms[0];
            for (size_t i = 1; i < acc.kl_terms.size(); ++i)
                sum = add(sum, acc.kl_terms[i]);
            result.supervision = scale(sum, 1.0 / double(acc.kl_terms.size()));
        }
        return result;
    }

    ForwardResult forward(const std::vector<int>& src,
                          const std::vector<int>& tgt_in,
                          const ForwardOptions& opts) {
        return forward(src, static_cast<int>(src.size()), tgt_in,
                       static_cast<int>(tgt_in.size()), opts);
    }

    // Autoregressive greedy decoding with incremental caches. Decoder-self
    // selection recomputes only the newest query's row over cached keys.
    std::vector<int> greedy_decode(const std::vector<int>& src, int max_steps,
                                   AttnPath path = AttnPath::Infer) {
        NoGradScope no_grad;
        check_tokens(src, static_cast<int>(src.size()));
        if (max_steps < 1) throw ContractError("greedy_decode: max_steps >= 1");

        ForwardOptions enc_opts;
        enc_opts.path = path;
        Accum acc(enc_opts);
        GroupCache groups;
        Tensor enc_out = encode_block(src, static_cast<int>(src.size()),
                                      enc_opts, acc, groups);
        return decode_loop(enc_out, max_steps, path);
    }

    // ------------------------------------------------------------------
    // Construction details (public for checkpointing)
    // ------------------------------------------------------------------

    // Leader layers per kind, in layer order.
    std::vector<int> leaders() const {
        std::vector<int> ls;
        const int r = uses_selection() ? cfg_.selection.r : 1;
        for (int i = 0; i < cfg_.n_layers; i += r) ls.push_back(i);
        return ls;
    }

private:
    struct Accum {
        explicit Accum(const ForwardOptions& o) : opts(o) {}
        const ForwardOptions& opts;
        std::vector<AttentionRecord> records;
        std::map<GroupKey, MassAccum> mass;
        std::vector<Tensor> kl_terms;
    };

    struct GroupSel {
        Tensor a_s;       // leader's selection attention (graph tensor)
        Tensor mask;      // binary
        Tensor gate_src;  // straight-through surrogate or the plain mask
        bool has_a_s = false;
    };
    using GroupCache = std::map<GroupKey, GroupSel>;

    void check_tokens(const std::vector<int>& ids, int len) const {
        if (static_cast<int>(ids.size()) > cfg_.max_len) {
            throw InputError("sequence length " + std::to_string(ids.size()) +
                             " exceeds max_len " + std::to_string(cfg_.max_len));
        }
        if (len > static_cast<int>(ids.size()) || len < 1) {
            throw InputError("invalid sequence length " + std::to_string(len));
        }
        for (int id : ids) {
            if (id < 0 || id >= cfg_.vocab_size) {
                throw InputError("token id " + std::to_string(id) +
                                 " out of vocabulary of size " +
                                 std::to_string(cfg_.vocab_size));
            }
        }
    }

    Tensor embed(const std::vector<int>& ids, const std::string& table,
                 const ForwardOptions& opts) {
        Tensor x = scale(embedding_rows(ids, param(table)), std::sqrt(double(cfg_.d)));
        const int T = static_cast<int>(ids.size());
        std::vector<double> pe(static_cast<size_t>(T) * cfg_.d);
        std::copy_n(pe_.begin(), pe.size(), pe.begin());
        x = add(x, Tensor::from_values({T, cfg_.d}, std::move(pe)));
        return maybe_dropout(x, opts);
    }

    Tensor maybe_dropout(const Tensor& x, const ForwardOptions& opts) {
        if (!opts.dropout_on || cfg_.dropout <= 0.0 || opts.dropout_rng == nullptr)
            return x;
        return dropout(x, cfg_.dropout, *opts.dropout_rng);
    }

    Tensor ffn_block(const Tensor& h, const std::string& lp) {
        Tensor a = add_row_vector(matmul(h, param(lp + ".ffn.w1"), "ffn"),
                                  param(lp + ".ffn.b1"));
        return add_row_vector(matmul(relu(a), param(lp + ".ffn.w2"), "ffn"),
                              param(lp + ".ffn.b2"));
    }

    Tensor encode_block(const std::vector<int>& src, int src_len,
                        const ForwardOptions& opts, Accum& acc,
                        GroupCache& groups) {
        const int S = static_cast<int>(src.size());
        std::vector<bool> src_pad(S);
        for (int j = 0; j < S; ++j) src_pad[j] = j >= src_len;
        std::vector<std::uint8_t> src_valid(S);
        for (int j = 0; j < S; ++j) src_valid[j] = src_pad[j] ? 0 : 1;
        const StructuralMask sm =
            StructuralMask::build(AttnKind::EncoderSelf, S, S, &src_pad);

        Tensor x = embed(src, "src_emb", opts);
        for (int layer = 0; layer < cfg_.n_layers; ++layer) {
            const std::string lp = "enc." + std::to_string(layer);
            Tensor h1 = layer_norm_rows(x, param(lp + ".ln1.g"), param(lp + ".ln1.b"));
            Tensor attn_out =
                attention_site(AttnKind::EncoderSelf, layer, lp + ".attn",
                               lp + ".sel", h1, h1, sm, src_valid, opts, acc,
                               groups);
            x = add(x, maybe_dropout(attn_out, opts));
            Tensor h2 = layer_norm_rows(x, param(lp + ".ln2.g"), param(lp + ".ln2.b"));
            x = add(x, maybe_dropout(ffn_block(h2, lp), opts));
        }
        return layer_norm_rows(x, param("enc.final_ln.g"), param("enc.final_ln.b"));
    }

    // The group's selection attention and mask; computed at the leader,
    // reused bit-identically by followers.
    GroupSel& group_selection(AttnKind kind, int layer, const std::string& sel_prefix,
                              const Tensor& xq, const Tensor& xk,
                              const StructuralMask& sm, const ForwardOptions& opts,
                              GroupCache& groups) {
        const int r = cfg_.selection.r;
        const int leader = group_leader(layer, cfg_.fixed_window ? 1 : r);
        const GroupKey key{static_cast<int>(kind), leader};
        auto it = groups.find(key);
        if (it != groups.end()) return it->second;

        GroupSel sel;
        const int nq = sm.n_q, nk = sm.n_k;
        if (cfg_.fixed_window) {
            sel.mask = fixed_window_mask(nq, nk, cfg_.effective_window(), kind, &sm);
            sel.a_s = Tensor::from_values(
                {nq, nk},
                detail::normalized_mask_rows(sel.mask.values(), nq, nk));
            sel.gate_src = sel.mask;
            sel.has_a_s = false;
        } else {
            sel.a_s = selection_scores(xq, xk, selection_layer(sel_prefix), &sm);
            sel.has_a_s = true;
            const double k_now = state_k(kind, leader);
            std::vector<double> mask_values =
                topk_mask(sel.a_s, k_now, cfg_.selection.min_tokens, sm).values();
            if (opts.tape != nullptr) mask_values = opts.tape->next(std::move(mask_values));
            sel.mask = Tensor::from_values({nq, nk}, std::move(mask_values));
            const bool train_path = opts.path == AttnPath::Train;
            sel.gate_src = (cfg_.use_reparam && train_path)
                               ? straight_through(sel.mask, sel.a_s)
                               : sel.mask;
        }
        return groups.emplace(key, std::move(sel)).first->second;
    }

    Tensor attention_site(AttnKind kind, int layer, const std::string& prefix,
                          const std::string& sel_prefix, const Tensor& xq,
                          const Tensor& xk, const StructuralMask& sm,
                          const std::vector<std::uint8_t>& q_valid,
                          const ForwardOptions& opts, Accum& acc,
                          GroupCache& groups) {
        const int H = cfg_.heads;
        const int dh = cfg_.head_dim();
        const int nq = sm.n_q, nk = sm.n_k;
        Tensor Q = matmul(xq, param(prefix + ".wq"), "attn.proj");
        Tensor K = matmul(xk, param(prefix + ".wk"), "attn.proj");
        Tensor V = matmul(xk, param(prefix + ".wv"), "attn.proj");

        GroupSel* sel = nullptr;
        if (cfg_.selection_enabled) {
            sel = &group_selection(kind, layer, sel_prefix, xq, xk, sm, opts, groups);
        }
        const int leader =
            cfg_.selection_enabled && !cfg_.fixed_window
                ? group_leader(layer, cfg_.selection.r)
                : layer;
        const bool is_leader = layer == leader;

        if (opts.site_costs != nullptr) {
            SiteCost sc;
            sc.leader = sel != nullptr && sel->has_a_s && is_leader;
            sc.full_pairs = static_cast<long long>(nq) * nk;
            sc.adm_pairs = sm.admissible_pairs();
            sc.k = sel != nullptr && !cfg_.fixed_window ? state_k(kind, leader) : 1.0;
            opts.site_costs->push_back(sc);
        }

        std::vector<Tensor> head_outputs;
        head_outputs.reserve(H);
        const bool train_path = opts.path == AttnPath::Train;
        Tensor site_mask = sel != nullptr ? sel->mask : admissible_mask_tensor(sm);
        Tensor additive;
        Tensor gate;
        if (train_path) {
            additive = sm.additive();
            if (sel != nullptr) gate = log_mask_gate(sel->gate_src);
        }
        const bool need_teacher =
            train_path && (opts.want_mass || opts.capture_records ||
                           (opts.want_supervision && sel != nullptr &&
                            sel->has_a_s && is_leader));

        std::vector<double> teacher_pooled;
        std::vector<Tensor> teacher_graph_heads;  // symmetric supervision only
        if (need_teacher) teacher_pooled.assign(static_cast<size_t>(nq) * nk, 0.0);

        for (int h = 0; h < H; ++h) {
            Tensor Qh = slice_cols(Q, h * dh, dh);
            Tensor Kh = slice_cols(K, h * dh, dh);
            Tensor Vh = slice_cols(V, h * dh, dh);
            if (train_path) {
                Tensor logits = scale(matmul_nt(Qh, Kh, "attn.logits"),
                                      1.0 / std::sqrt(double(dh)));
                Tensor masked = add(logits, additive);
                if (need_teacher) {
                    std::vector<double> probs =
                        detail::softmax_values_rows(masked.values(), nq, nk);
                    for (size_t i = 0; i < probs.size(); ++i)
                        teacher_pooled[i] += probs[i] / H;
                    if (cfg_.selection.symmetric_kl && opts.want_supervision &&
                        sel != nullptr && sel->has_a_s && is_leader) {
                        teacher_graph_heads.push_back(softmax_rows(masked));
                    }
                }
                Tensor att = sel != nullptr ? softmax_rows(add(masked, gate))
                                            : softmax_rows(masked);
                head_outputs.push_back(matmul(att, Vh, "attn.weighted_sum"));
            } else {
                AttentionResult res =
                    selective_attention(Qh, Kh, Vh, site_mask, AttnPath::Infer);
                head_outputs.push_back(res.output);
            }
        }
        Tensor out = matmul(concat_cols(head_outputs), param(prefix + ".wo"),
                            "attn.proj");

        if (need_teacher) {
            if (opts.tape != nullptr && opts.want_supervision && sel != nullptr &&
                sel->has_a_s && is_leader) {
                teacher_pooled = opts.tape->next(std::move(teacher_pooled));
            }
            Tensor teacher = Tensor::from_values({nq, nk}, teacher_pooled);
            const Tensor& mask_t = site_mask;
            if (opts.want_mass) {
                const GroupKey key{static_cast<int>(kind), leader};
                MassAccum& m = acc.mass[key];
                m.sum += captured_mass_rows(teacher, mask_t, q_valid);
                m.count += 1;
            }
            if (opts.want_supervision && sel != nullptr && sel->has_a_s && is_leader) {
                Tensor term = kl_attention_loss(sel->a_s, teacher, q_valid);
                if (cfg_.selection.symmetric_kl && !teacher_graph_heads.empty()) {
                    Tensor pooled = teacher_graph_heads[0];
                    for (size_t h = 1; h < teacher_graph_heads.size(); ++h)
                        pooled = add(pooled, teacher_graph_heads[h]);
                    pooled = scale(pooled, 1.0 / double(teacher_graph_heads.size()));
                    Tensor reverse =
                        kl_attention_loss(pooled, detach(sel->a_s), q_valid);
                    term = scale(add(term, reverse), 0.5);
                }
                acc.kl_terms.push_back(term);
            }
            if (opts.capture_records) {
                AttentionRecord rec;
                rec.kind = kind;
                rec.layer_index = layer;
                rec.full_attention = teacher;
                rec.selection_attention =
                    sel != nullptr ? detach(sel->a_s) : teacher;
                rec.mask = mask_t;
                rec.query_valid = q_valid;
                acc.records.push_back(std::move(rec));
            }
        }
        return out;
    }

    static Tensor admissible_mask_tensor(const StructuralMask& sm) {
        std::vector<double> v(sm.admissible.size());
        for (size_t i = 0; i < v.size(); ++i) v[i] = sm.admissible[i] ? 1.0 : 0.0;
        return Tensor::from_values({sm.n_q, sm.n_k}, std::move(v));
    }

    SelectionLayer selection_layer(const std::string& sel_prefix) {
        SelectionLayer sl;
        sl.w_q = param(sel_prefix + ".wq");
        sl.w_k = param(sel_prefix + ".wk");
        sl.d_s = cfg_.selection.d_s;
        return sl;
    }

    // ------------------------------------------------------------------
    // Incremental decoding
    // ------------------------------------------------------------------

    struct RowOps {
        // y = x * W, counting din*dout MACs.
        static std::vector<double> matvec(const std::vector<double>& x,
                                          const Tensor& W, const char* label) {
            const int din = W.rows(), dout = W.cols();
            std::vector<double> y(static_cast<size_t>(dout), 0.0);
            const auto& wv = W.values();
            for (int i = 0; i < din; ++i) {
                const double xi = x[static_cast<size_t>(i)];
                const double* wrow = wv.data() + static_cast<size_t>(i) * dout;
                for (int j = 0; j < dout; ++j) y[j] += xi * wrow[j];
            }
            count_macs(label, static_cast<std::uint64_t>(din) * dout);
            return y;
        }

        static std::vector<double> layer_norm(const std::vector<double>& x,
                                              const Tensor& g, const Tensor& b,
                                              double eps = 1e-5) {
            const int d = static_cast<int>(x.size());
            double mean = 0.0;
            for (double v : x) mean += v;
            mean /= d;
            double var = 0.0;
            for (double v : x) {
                const double c = v - mean;
                var += c * c;
            }
            var /= d;
            const double is = 1.0 / std::sqrt(var + eps);
            std::vector<double> y(x.size());
            for (int j = 0; j < d; ++j)
                y[j] = (x[j] - mean) * is * g.values()[j] + b.values()[j];
            return y;
        }
    };

    struct DecodeLayerCache {
        std::vector<double> self_k;   // [t, d]
        std::vector<double> self_v;   // [t, d]
        std::vector<double> self_ks;  // [t, d_s], leader layers only
        std::vector<double> cross_k;  // [S, d]
        std::vector<double> cross_v;  // [S, d]
        std::vector<double> cross_ks; // [S, d_s], leader layers only
    };

    // Top indices of one selection row; ties break toward lower key index.
    static std::vector<int> top_indices_row(const std::vector<double>& scores,
                                            int n, int keep) {
        std::vector<int> idx(n);
        for (int j = 0; j < n; ++j) idx[j] = j;
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
            return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
        });
        idx.resize(keep);
        std::sort(idx.begin(), idx.end());
        return idx;
    }

    std::vector<double> selection_row(const std::vector<double>& q_s,
                                      const std::vector<double>& ks_cache,
                                      int n_keys) {
        const int d_s = cfg_.selection.d_s;
        std::vector<double> logits(static_cast<size_t>(n_keys));
        const double inv = 1.0 / std::sqrt(double(d_s));
        for (int j = 0; j < n_keys; ++j) {
            const double* krow = ks_cache.data() + static_cast<size_t>(j) * d_s;
            double s = 0.0;
            for (int c = 0; c < d_s; ++c) s += q_s[static_cast<size_t>(c)] * krow[c];
            logits[static_cast<size_t>(j)] = s * inv;
        }
        count_macs("select.logits", static_cast<std::uint64_t>(n_keys) * d_s);
        return detail::softmax_values_rows(logits, 1, n_keys);
    }

    // One attention row over cached keys restricted to `kept` (gather path)
    // or over all keys with non-kept positions pushed to the sentinel
    // (dense path). Both produce identical outputs.
    std::vector<double> attend_row(const std::vector<double>& q,
                                   const std::vector<double>& k_cache,
                                   const std::vector<double>& v_cache,
                                   int n_keys, const std::vector<int>& kept,
                                   AttnPath path) {
        const int H = cfg_.heads;
        const int dh = cfg_.head_dim();
        const int d = cfg_.d;
        const double inv = 1.0 / std::sqrt(double(dh));
        std::vector<double> out(static_cast<size_t>(d), 0.0);
        std::vector<double> logits;
        if (path == AttnPath::Infer) {
            logits.resize(kept.size());
            for (int h = 0; h < H; ++h) {
                const int off = h * dh;
                double rowmax = -std::numeric_limits<double>::infinity();
                for (size_t r = 0; r < kept.size(); ++r) {
                    const double* krow =
                        k_cache.data() + static_cast<size_t>(kept[r]) * d + off;
                    double s = 0.0;
                    for (int c = 0; c < dh; ++c) s += q[static_cast<size_t>(off + c)] * krow[c];
                    s *= inv;
                    logits[r] = s;
                    rowmax = std::max(rowmax, s);
                }
                double denom = 0.0;
                for (double& s : logits) {
                    s = std::exp(s - rowmax);
                    denom += s;
                }
                const double invd = 1.0 / denom;
                for (size_t r = 0; r < kept.size(); ++r) {
                    const double w = logits[r] * invd;
                    const double* vrow =
                        v_cache.data() + static_cast<size_t>(kept[r]) * d + off;
                    for (int c = 0; c < dh; ++c) out[static_cast<size_t>(off + c)] += w * vrow[c];
                }
            }
            count_macs("attn.logits",
                       static_cast<std::uint64_t>(kept.size()) * d);
            count_macs("attn.weighted_sum",
                       static_cast<std::uint64_t>(kept.size()) * d);
        } else {
            std::vector<std::uint8_t> is_kept(static_cast<size_t>(n_keys), 0);
            for (int j : kept) is_kept[static_cast<size_t>(j)] = 1;
            logits.resize(static_cast<size_t>(n_keys));
            for (int h = 0; h < H; ++h) {
                const int off = h * dh;
                double rowmax = -std::numeric_limits<double>::infinity();
                for (int j = 0; j < n_keys; ++j) {
                    const double* krow =
                        k_cache.data() + static_cast<size_t>(j) * d + off;
                    double s = 0.0;
                    for (int c = 0; c < dh; ++c) s += q[static_cast<size_t>(off + c)] * krow[c];
                    s = s * inv + (is_kept[static_cast<size_t>(j)] ? 0.0 : kMaskedLogit);
                    logits[static_cast<size_t>(j)] = s;
                    rowmax = std::max(rowmax, s);
                }
                double denom = 0.0;
                for (double& s : logits) {
                    s = std::exp(s - rowmax);
                    denom += s;
                }
                const double invd = 1.0 / denom;
                for (int j = 0; j < n_keys; ++j) {
                    const double w = logits[static_cast<size_t>(j)] * invd;
                    const double* vrow =
                        v_cache.data() + static_cast<size_t>(j) * d + off;
                    for (int c = 0; c < dh; ++c) out[static_cast<size_t>(off + c)] += w * vrow[c];
                }
            }
            count_macs("attn.logits", static_cast<std::uint64_t>(n_keys) * d);
            count_macs("attn.weighted_sum", static_cast<std::uint64_t>(n_keys) * d);
        }
        return out;
    }

    std::vector<int> decode_kept(AttnKind kind, int n_adm,
                                 const std::vector<double>& a_s_row,
                                 int leader, int query_pos, int horizon) {
        if (!cfg_.selection_enabled) {
            std::vector<int> all(n_adm);
            for (int j = 0; j < n_adm; ++j) all[j] = j;
            return all;
        }
        if (cfg_.fixed_window) {
            const int w = cfg_.effective_window();
            const double half = w / 2.0;
            const double center =
                kind == AttnKind::Cross
                    ? (horizon > 1 ? double(query_pos) * (n_adm - 1) / (horizon - 1)
                                   : (n_adm - 1) / 2.0)
                    : double(query_pos);
            std::vector<int> kept;
            for (int j = 0; j < n_adm; ++j)
                if (std::fabs(center - j) <= half) kept.push_back(j);
            if (kept.empty()) {
                int best = 0;
                double best_dist = std::numeric_limits<double>::infinity();
                for (int j = 0; j < n_adm; ++j) {
                    const double dist = std::fabs(center - j);
                    if (dist < best_dist) {
                        best_dist = dist;
                        best = j;
                    }
                }
                kept.push_back(best);
            }
            return kept;
        }
        const double k_now = state_k(kind, leader);
        const int keep = kept_count(k_now, cfg_.selection.min_tokens, n_adm);
        return top_indices_row(a_s_row, n_adm, keep);
    }

    std::vector<int> decode_loop(const Tensor& enc_out, int max_steps,
                                 AttnPath path) {
        const int S = enc_out.rows();
        const int d = cfg_.d;
        const int d_s = cfg_.selection.d_s;
        const int L = cfg_.n_layers;
        const int r = uses_selection() ? cfg_.selection.r : 1;

        std::vector<DecodeLayerCache> caches(static_cast<size_t>(L));
        for (int i = 0; i < L; ++i) {
            const std::string lp = "dec." + std::to_string(i);
            caches[i].cross_k =
                matmul(enc_out, param(lp + ".cross.wk"), "attn.proj").values();
            caches[i].cross_v =
                matmul(enc_out, param(lp + ".cross.wv"), "attn.proj").values();
            if (uses_selection() && i % r == 0) {
                caches[i].cross_ks =
                    matmul(enc_out, param(lp + ".cross_sel.wk"), "select.proj")
                        .values();
            }
        }

        std::vector<int> output;
        int token = kBosId;
        const auto& tgt_emb = param("tgt_emb").values();
        for (int p = 0; p < max_steps; ++p) {
            // Embed current token at position p.
            std::vector<double> x(static_cast<size_t>(d));
            const double sq = std::sqrt(double(d));
            for (int c = 0; c < d; ++c)
                x[c] = tgt_emb[static_cast<size_t>(token) * d + c] * sq +
                       pe_[static_cast<size_t>(p) * d + c];

            // Kept indices shared within a group, recomputed per step at the
            // leader layer only.
            std::map<int, std::vector<int>> self_kept, cross_kept;

            for (int i = 0; i < L; ++i) {
                const std::string lp = "dec." + std::to_string(i);
                DecodeLayerCache& cache = caches[i];
                std::vector<double> h1 =
                    RowOps::layer_norm(x, param(lp + ".ln1.g"), param(lp + ".ln1.b"));
                std::vector<double> k_new = RowOps::matvec(h1, param(lp + ".self.wk"), "attn.proj");
                std::vector<double> v_new = RowOps::matvec(h1, param(lp + ".self.wv"), "attn.proj");
                std::vector<double> q = RowOps::matvec(h1, param(lp + ".self.wq"), "attn.proj");
                cache.self_k.insert(cache.self_k.end(), k_new.begin(), k_new.end());
                cache.self_v.insert(cache.self_v.end(), v_new.begin(), v_new.end());
                const int t = p + 1;

                const int leader = group_leader(i, r);
                if (uses_selection() && i == leader) {
                    std::vector<double> q_s =
                        RowOps::matvec(h1, param(lp + ".self_sel.wq"), "select.proj");
                    std::vector<double> ks_new =
                        RowOps::matvec(h1, param(lp + ".self_sel.wk"), "select.proj");
                    cache.self_ks.insert(cache.self_ks.end(), ks_new.begin(),
                                         ks_new.end());
                    std::vector<double> a_s_row =
                        selection_row(q_s, cache.self_ks, t);
                    self_kept[leader] = decode_kept(AttnKind::DecoderSelf, t,
                                                    a_s_row, leader, p, max_steps);
                } else if (!self_kept.count(leader)) {
                    self_kept[leader] = decode_kept(AttnKind::DecoderSelf, t, {},
                                                    leader, p, max_steps);
                }
                std::vector<double> self_att = attend_row(
                    q, cache.self_k, cache.self_v, t, self_kept[leader], path);
                std::vector<double> self_out =
                    RowOps::matvec(self_att, param(lp + ".self.wo"), "attn.proj");
                for (int c = 0; c < d; ++c) x[c] += self_out[c];

                std::vector<double> h2 =
                    RowOps::layer_norm(x, param(lp + ".ln2.g"), param(lp + ".ln2.b"));
                std::vector<double> qc = RowOps::matvec(h2, param(lp + ".cross.wq"), "attn.proj");
                if (uses_selection() && i == leader) {
                    std::vector<double> q_s =
                        RowOps::matvec(h2, param(lp + ".cross_sel.wq"), "select.proj");
                    std::vector<double> a_s_row =
                        selection_row(q_s, cache.cross_ks, S);
                    cross_kept[leader] = decode_kept(AttnKind::Cross, S, a_s_row,
                                                     leader, p, max_steps);
                } else if (!cross_kept.count(leader)) {
                    cross_kept[leader] =
                        decode_kept(AttnKind::Cross, S, {}, leader, p, max_steps);
                }
                std::vector<double> cross_att = attend_row(
                    qc, cache.cross_k, cache.cross_v, S, cross_kept[leader], path);
                std::vector<double> cross_out =
                    RowOps::matvec(cross_att, param(lp + ".cross.wo"), "attn.proj");
                for (int c = 0; c < d; ++c) x[c] += cross_out[c];

                std::vector<double> h3 =
                    RowOps::layer_norm(x, param(lp + ".ln3.g"), param(lp + ".ln3.b"));
                std::vector<double> a =
                    RowOps::matvec(h3, param(lp + ".ffn.w1"), "ffn");
                const auto& b1 = param(lp + ".ffn.b1").values();
                for (size_t c = 0; c < a.size(); ++c) {
                    a[c] += b1[c];
                    if (a[c] < 0.0) a[c] = 0.0;
                }
                std::vector<double> f = RowOps::matvec(a, param(lp + ".ffn.w2"), "ffn");
                const auto& b2 = param(lp + ".ffn.b2").values();
                for (int c = 0; c < d; ++c) x[c] += f[c] + b2[c];
            }
            std::vector<double> final_row = RowOps::layer_norm(
                x, param("dec.final_ln.g"), param("dec.final_ln.b"));
            std::vector<double> logits =
                RowOps::matvec(final_row, param("out_w"), "logits.vocab");
            int best = 0;
            for (int v = 1; v < cfg_.vocab_size; ++v)
                if (logits[static_cast<size_t>(v)] > logits[static_cast<size_t>(best)]) best = v;
            output.push_back(best);
            if (best == kEosId) break;
            token = best;
            if (p + 2 > cfg_.max_len) break;  // next position would overflow
        }
        return output;
    }

    // ------------------------------------------------------------------
    // Parameter construction
    // ------------------------------------------------------------------

    void add_param(const std::string& name, Shape shape, const char* init) {
        Rng rng(cfg_.seed, "params." + name);
        std::vector<double> v(static_cast<size_t>(lasformer::numel(shape)));
        if (std::string(init) == "glorot") {
            const double limit = std::sqrt(6.0 / (shape[0] + shape[1]));
            for (double& x : v) x = rng.uniform(-limit, limit);
        } else if (std::string(init) == "embed") {
            const double stddev = 1.0 / std::sqrt(double(cfg_.d));
            for (double& x : v) x = rng.normal(0.0, stddev);
        } else if (std::string(init) == "ones") {
            std::fill(v.begin(), v.end(), 1.0);
        } else {
            std::fill(v.begin(), v.end(), 0.0);
        }
        Tensor t = Tensor::from_values(std::move(shape), std::move(v), true);
        param_order_.push_back(name);
        params_[name] = std::move(t);
    }

    void add_block_params(const std::string& lp, bool decoder) {
        const int d = cfg_.d, f = cfg_.ffn_dim, ds = cfg_.selection.d_s;
        const int layer_index = std::stoi(lp.substr(lp.find('.') + 1));
        const bool leader =
            uses_selection() && layer_index % cfg_.selection.r == 0;
        add_param(lp + ".ln1.g", {d}, "ones");
        add_param(lp + ".ln1.b", {d}, "zeros");
        const std::string attn = decoder ? lp + ".self" : lp + ".attn";
        for (const char* w : {".wq", ".wk", ".wv", ".wo"})
            add_param(attn + w, {d, d}, "glorot");
        if (leader) {
            const std::string sel = decoder ? lp + ".self_sel" : lp + ".sel";
            add_param(sel + ".wq", {d, ds}, "glorot");
            add_param(sel + ".wk", {d, ds}, "glorot");
        }
        add_param(lp + ".ln2.g", {d}, "ones");
        add_param(lp + ".ln2.b", {d}, "zeros");
        if (decoder) {
            for (const char* w : {".wq", ".wk", ".wv", ".wo"})
                add_param(lp + ".cross" + w, {d, d}, "glorot");
            if (leader) {
                add_param(lp + ".cross_sel.wq", {d, ds}, "glorot");
                add_param(lp + ".cross_sel.wk", {d, ds}, "glorot");
            }
            add_param(lp + ".ln3.g", {d}, "ones");
            add_param(lp + ".ln3.b", {d}, "zeros");
        }
        add_param(lp + ".ffn.w1", {d, f}, "glorot");
        add_param(lp + ".ffn.b1", {f}, "zeros");
        add_param(lp + ".ffn.w2", {f, d}, "glorot");
        add_param(lp + ".ffn.b2", {d}, "zeros");
    }

    void build_params() {
        add_param("src_emb", {cfg_.vocab_size, cfg_.d}, "embed");
        add_param("tgt_emb", {cfg_.vocab_size, cfg_.d}, "embed");
        add_param("out_w", {cfg_.d, cfg_.vocab_size}, "glorot");
        for (int i = 0; i < cfg_.n_layers; ++i)
            add_block_params("enc." + std::to_string(i), false);
        add_param("enc.final_ln.g", {cfg_.d}, "ones");
        add_param("enc.final_ln.b", {cfg_.d}, "zeros");
        for (int i = 0; i < cfg_.n_layers; ++i)
            add_block_params("dec." + std::to_string(i), true);
        add_param("dec.final_ln.g", {cfg_.d}, "ones");
        add_param("dec.final_ln.b", {cfg_.d}, "zeros");
    }

    void build_states() {
        if (!uses_selection()) return;
        for (int leader : leaders()) {
            for (AttnKind kind : {AttnKind::EncoderSelf, AttnKind::Cross,
                                  AttnKind::DecoderSelf}) {
                SparsityState st;
                st.k = cfg_.selection.k_init;
                st.layer_index = leader;
                st.kind = kind;
                st.frozen_increase = st.k < cfg_.selection.freeze_threshold;
                states_[{static_cast<int>(kind), leader}] = st;
            }
        }
    }

    void build_positional() {
        pe_.assign(static_cast<size_t>(cfg_.max_len) * cfg_.d, 0.0);
        for (int pos = 0; pos < cfg_.max_len; ++pos) {
            for (int i = 0; i < cfg_.d / 2; ++i) {
                const double angle =
                    pos / std::pow(10000.0, (2.0 * i) / cfg_.d);
                pe_[static_cast<size_t>(pos) * cfg_.d + 2 * i] = std::sin(angle);
                if (2 * i + 1 < cfg_.d)
                    pe_[static_cast<size_t>(pos) * cfg_.d + 2 * i + 1] =
                        std::cos(angle);
            }
        }
    }

    ModelConfig cfg_;
    std::vector<std::string> param_order_;
    std::map<std::string, Tensor> params_;
    std::map<GroupKey, SparsityState> states_;
    std::vector<double> pe_;
};

}  // namespace lasformer
