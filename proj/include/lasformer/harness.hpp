// Experiment harness behind the CLI verbs: training runs with their CSV and
// checkpoint artifacts, greedy-decoding evaluation, cost sweeps, attention
// dumps, sparsity reports, and paired ablation runs.
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lasformer/checkpoint.hpp"
#include "lasformer/config.hpp"
#include "lasformer/cost_model.hpp"
#include "lasformer/data.hpp"
#include "lasformer/model.hpp"
#include "lasformer/training.hpp"

namespace lasformer {

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalMetrics {
    std::string split;
    std::string mode;  // "train" or "infer" attention path
    long long examples = 0;
    double token_accuracy = 0.0;
    double exact_accuracy = 0.0;
    double far_recall = -1.0;  // longrange-recall only; -1 otherwise
    // Present when instrumented (infer mode):
    double measured_attention_ops = -1.0;
    double analytic_attention_ops = -1.0;
    double deviation_selection = -1.0;
    double deviation_masked = -1.0;
    double deviation_total = -1.0;
    double attn_cost_percent = -1.0;  // measured vs dense-equivalent site cost

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["split"] = split;
        j["mode"] = mode;
        j["examples"] = examples;
        j["token_accuracy"] = token_accuracy;
        j["exact_accuracy"] = exact_accuracy;
        if (far_recall >= 0.0) j["far_recall"] = far_recall;
        if (measured_attention_ops >= 0.0) {
            j["measured_attention_ops"] = measured_attention_ops;
            j["analytic_attention_ops"] = analytic_attention_ops;
            j["deviation_selection"] = deviation_selection;
            j["deviation_masked"] = deviation_masked;
            j["deviation_total"] = deviation_total;
            j["attn_cost_percent"] = attn_cost_percent;
        }
        return j;
    }
};

inline AttnPath path_from_string(const std::string& s) {
    if (s == "train") return AttnPath::Train;
    if (s == "infer") return AttnPath::Infer;
    throw ConfigError("unknown attention path mode: " + s + " (train|infer)");
}

// Greedy-decoding metrics over a dataset; optionally also runs an
// instrumented teacher-forced infer pass for op counts.
inline EvalMetrics evaluate(Model& model, const TaskSpec& task, const Dataset& ds,
                            AttnPath path, bool with_counts,
                            int max_examples = 0) {
    EvalMetrics m;
    m.mode = path == AttnPath::Train ? "train" : "infer";
    long long matched = 0, total = 0, exact = 0;
    long long far_hit = 0, far_total = 0;
    const int count = max_examples > 0
                          ? std::min<int>(max_examples, ds.examples.size())
                          : static_cast<int>(ds.examples.size());
    for (int e = 0; e < count; ++e) {
        const Example& ex = ds.examples[e];
        const std::vector<int> ref(ex.tgt.begin() + 1, ex.tgt.end());
        const int max_steps =
            std::min(model.config().max_len, static_cast<int>(ref.size()) + 16);
        const std::vector<int> pred = model.greedy_decode(ex.src, max_steps, path);
        long long row_match = 0;
        for (size_t i = 0; i < ref.size(); ++i) {
            if (i < pred.size() && pred[i] == ref[i]) ++row_match;
        }
        matched += row_match;
        total += static_cast<long long>(ref.size());
        if (pred == ref) ++exact;
        if (task.task == Task::LongrangeRecall) {
            const RecallInfo info = longrange_recall_info(ex.src, task);
            for (int p : info.answer_tgt_positions) {
                ++far_total;
                const size_t pi = static_cast<size_t>(p - 1);
                if (pi < pred.size() && pred[pi] == ex.tgt[static_cast<size_t>(p)])
                    ++far_hit;
            }
        }
    }
    m.examples = count;
    m.token_accuracy = total > 0 ? double(matched) / total : 0.0;
    m.exact_accuracy = count > 0 ? double(exact) / count : 0.0;
    if (task.task == Task::LongrangeRecall && far_total > 0)
        m.far_recall = double(far_hit) / far_total;

    if (with_counts) {
        OpCounter counter;
        std::vector<SiteCost> sites;
        ForwardOptions opts;
        opts.path = AttnPath::Infer;
        opts.site_costs = &sites;
        CounterScope scope(counter);
        for (int e = 0; e < count; ++e) {
            const Example& ex = ds.examples[e];
            const TeacherForced tf =
                teacher_forced(ex.tgt, static_cast<int>(ex.tgt.size()));
            model.forward(ex.src, tf.tgt_in, opts);
        }
        const CostDeviation dev = measured_vs_analytic(
            counter, sites, model.config().d, model.config().selection.d_s);
        m.measured_attention_ops = dev.measured_attention_ops;
        m.analytic_attention_ops = dev.analytic_attention_ops;
        m.deviation_selection = dev.selection;
        m.deviation_masked = dev.masked_attention;
        m.deviation_total = dev.attention_total;
        double dense_equiv = 0.0;
        for (const SiteCost& s : sites)
            dense_equiv += 2.0 * double(s.adm_pairs) * model.config().d;
        m.attn_cost_percent = 100.0 * dev.measured_attention_ops / dense_equiv;
    }
    return m;
}

// Cheap cadence metric: teacher-forced argmax accuracy on non-pad targets.
inline double teacher_forced_accuracy(Model& model, const Dataset& ds,
                                      int max_examples) {
    NoGradScope no_grad;
    ForwardOptions opts;
    opts.path = AttnPath::Train;
    long long matched = 0, total = 0;
    const int count = std::min<int>(max_examples, ds.examples.size());
    for (int e = 0; e < count; ++e) {
        const Example& ex = ds.examples[e];
        const TeacherForced tf =
            teacher_forced(ex.tgt, static_cast<int>(ex.tgt.size()));
        ForwardResult res = model.forward(ex.src, tf.tgt_in, opts);
        const int V = model.config().vocab_size;
        for (size_t i = 0; i < tf.targets.size(); ++i) {
            int best = 0;
            for (int v = 1; v < V; ++v)
                if (res.logits.at(static_cast<int>(i), v) >
                    res.logits.at(static_cast<int>(i), best))
                    best = v;
            if (best == tf.targets[i]) ++matched;
            ++total;
        }
    }
    return total > 0 ? double(matched) / total : 0.0;
}

// ---------------------------------------------------------------------------
// Training runs
// ---------------------------------------------------------------------------

inline ModelConfig apply_ablation(ModelConfig cfg, const std::string& variant) {
    if (variant == "fixed-window") {
        cfg.fixed_window = true;
    } else if (variant == "no-supervision") {
        cfg.selection.alpha = 0.0;
        cfg.selection.symmetric_kl = false;
    } else if (variant == "no-reparam") {
        cfg.use_reparam = false;
    } else {
        throw ConfigError("unknown ablation variant '" + variant +
                          "'; valid: fixed-window, no-supervision, no-reparam");
    }
    return cfg;
}

struct TrainedRun {
    Model model;
    Adam adam;
    long long final_step = 0;
    std::vector<std::pair<long long, LossBreakdown>> losses;
    std::vector<SparsityTrajectoryRow> trajectory;
};

inline TrainedRun run_training(const ExperimentConfig& cfg,
                               const std::string& resume_path = "",
                               std::ostream* log = nullptr) {
    cfg.validate();
    const Dataset train_ds = generate(cfg.task, Split::Train);
    const Dataset valid_ds = generate(cfg.task, Split::Valid);
    TrainedRun run{Model(cfg.model), Adam(cfg.optimizer)};
    long long start_step = 0;
    if (!resume_path.empty()) {
        const CheckpointData data =
            load_checkpoint(resume_path, run.model, &run.adam);
        start_step = data.step;
    }
    for (long long step = start_step + 1; step <= cfg.train_steps; ++step) {
        const std::vector<int> indices = sample_batch_indices(
            cfg.model.seed, step, static_cast<int>(train_ds.examples.size()),
            cfg.batch_size);
        const Batch batch = make_batch(train_ds, indices);
        TrainStepResult res = train_step(run.model, run.adam, batch, step);
        run.losses.emplace_back(step, res.loss);
        run.trajectory.insert(run.trajectory.end(), res.trajectory.begin(),
                              res.trajectory.end());
        if (log != nullptr &&
            (step % std::max<long long>(1, cfg.train_steps / 20) == 0 ||
             step == cfg.train_steps)) {
            (*log) << "step " << step << " loss " << std::setprecision(6)
                   << res.loss.total << " (nmt " << res.loss.nmt_loss << " sup "
                   << res.loss.supervision_loss << ")";
            if (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
                (*log) << " tf-acc "
                       << teacher_forced_accuracy(run.model, valid_ds, 16);
            }
            (*log) << std::endl;
        }
    }
    run.final_step = cfg.train_steps;
    return run;
}

// Records of an evaluation pass (train-path forward, no dropout).
inline std::vector<AttentionRecord> collect_records(Model& model,
                                                    const Dataset& ds,
                                                    int max_examples) {
    NoGradScope no_grad;
    std::vector<AttentionRecord> records;
    ForwardOptions opts;
    opts.path = AttnPath::Train;
    opts.capture_records = true;
    const int count = std::min<int>(max_examples, ds.examples.size());
    for (int e = 0; e < count; ++e) {
        const Example& ex = ds.examples[e];
        const TeacherForced tf =
            teacher_forced(ex.tgt, static_cast<int>(ex.tgt.size()));
        ForwardResult res = model.forward(ex.src, tf.tgt_in, opts);
        for (auto& rec : res.records) records.push_back(std::move(rec));
    }
    return records;
}

// ---------------------------------------------------------------------------
// Artifact writers
// ---------------------------------------------------------------------------

namespace detail {

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << text;
    if (!out) throw IoError("failed writing: " + path);
}

inline std::string ratio_12sig(double ratio) {
    std::ostringstream os;
    os << std::setprecision(12) << ratio;
    return os.str();
}

inline std::string percent_2dec(double ratio) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << ratio * 100.0;
    return os.str();
}

}  // namespace detail

inline std::string sparsity_report_csv(const SparsityReport& report,
                                       const std::vector<int>& leaders) {
    std::ostringstream out;
    out << "leader_layer,encoder_self,cross,decoder_self\n";
    for (int leader : leaders) {
        out << leader;
        for (AttnKind kind :
             {AttnKind::EncoderSelf, AttnKind::Cross, AttnKind::DecoderSelf}) {
            out << ",";
            bool found = false;
            for (const auto& e : report.entries) {
                if (e.kind == kind && e.leader_layer == leader) {
                    out << detail::percent_2dec(e.mean_kept_fraction);
                    found = true;
                    break;
                }
            }
            if (!found) out << "-";
        }
        out << "\n";
    }
    return out.str();
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream out;
    out << "label,k,d_s,r,N,include_projections,ratio,percent,paper_percent,basis\n";
    for (const SweepRow& row : rows) {
        out << row.label << "," << detail::ratio_12sig(row.inputs.k) << ","
            << row.inputs.d_s << "," << row.inputs.r << ","
            << static_cast<long long>(row.inputs.N) << ","
            << (row.inputs.include_projections ? "yes" : "no") << ","
            << detail::ratio_12sig(row.ratio) << ","
            << detail::percent_2dec(row.ratio) << ",";
        if (row.reference_percent >= 0.0) {
            out << std::fixed << std::setprecision(0) << row.reference_percent;
            out << std::defaultfloat << std::setprecision(6);
        } else {
            out << "-";
        }
        out << ",r=" << row.inputs.r
            << (row.inputs.include_projections ? " with projections"
                                               : " projection-free")
            << "\n";
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// CLI verb implementations. Each returns a process exit status.
// ---------------------------------------------------------------------------

inline int cmd_train(const ExperimentConfig& cfg, const std::string& resume_path,
                     std::ostream& log) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    detail::write_text_file(cfg.out_dir + "/config.conf", serialize_config(cfg));

    TrainedRun run = run_training(cfg, resume_path, &log);

    std::ostringstream loss_csv;
    loss_csv << "step,nmt_loss,supervision_loss,total\n";
    for (const auto& [step, loss] : run.losses) {
        loss_csv << step << "," << detail::ratio_12sig(loss.nmt_loss) << ","
                 << detail::ratio_12sig(loss.supervision_loss) << ","
                 << detail::ratio_12sig(loss.total) << "\n";
    }
    detail::write_text_file(cfg.out_dir + "/loss.csv", loss_csv.str());

    std::ostringstream traj_csv;
    traj_csv << "step,kind,leader_layer,k,captured_mass\n";
    for (const SparsityTrajectoryRow& row : run.trajectory) {
        traj_csv << row.step << "," << to_string(row.kind) << ","
                 << row.leader_layer << "," << detail::ratio_12sig(row.k) << ","
                 << detail::ratio_12sig(row.captured_mass) << "\n";
    }
    detail::write_text_file(cfg.out_dir + "/sparsity_trajectory.csv",
                            traj_csv.str());

    save_checkpoint(cfg.out_dir + "/checkpoint.lasf", run.model, &run.adam,
                    run.final_step, serialize_config(cfg));

    if (cfg.report_sparsity) {
        const Dataset valid_ds = generate(cfg.task, Split::Valid);
        const std::vector<AttentionRecord> records =
            collect_records(run.model, valid_ds, 32);
        const int r = run.model.uses_selection() ? cfg.model.selection.r : 1;
        const SparsityReport report = sparsity_report(records, r);
        detail::write_text_file(cfg.out_dir + "/sparsity_report.csv",
                                sparsity_report_csv(report, run.model.leaders()));
    }
    log << "artifacts written to " << cfg.out_dir << std::endl;
    return 0;
}

// Rebuilds a model (and its config) from a checkpoint file.
struct LoadedModel {
    ExperimentConfig cfg;
    Model model;
    long long step;
};

inline LoadedModel load_model(const std::string& checkpoint_path) {
    // Two-phase: read the manifest's embedded config first, then reload into
    // a model built from it.
    std::ifstream in(checkpoint_path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + checkpoint_path);
    char magic[4];
    in.read(magic, 4);
    detail_checkpoint_skip_version(in);
    const std::uint64_t len = detail::read_u64(in);
    std::string manifest_text(len, '\0');
    in.read(manifest_text.data(), static_cast<std::streamsize>(len));
    const nlohmann::json manifest = nlohmann::json::parse(manifest_text);
    const ExperimentConfig cfg =
        parse_config_text(manifest.at("config").get<std::string>());
    LoadedModel lm{cfg, Model(cfg.model), 0};
    const CheckpointData data = load_checkpoint(checkpoint_path, lm.model, nullptr);
    lm.step = data.step;
    return lm;
}

inline void detail_checkpoint_skip_version(std::istream& in) {
    detail::read_u32(in);
}

inline int cmd_eval(const std::string& checkpoint_path, const std::string& split,
                    const std::string& mode, const std::string& out_path,
                    std::ostream& out) {
    LoadedModel lm = load_model(checkpoint_path);
    const Dataset ds = generate(lm.cfg.task, split_from_string(split));
    const AttnPath path = path_from_string(mode);
    EvalMetrics metrics = evaluate(lm.model, lm.cfg.task, ds, path,
                                   /*with_counts=*/path == AttnPath::Infer);
    metrics.split = split;
    const std::string text = metrics.to_json().dump(2) + "\n";
    if (!out_path.empty()) detail::write_text_file(out_path, text);
    out << text;
    return 0;
}

inline int cmd_cost(const std::string& name, const CostInputs& custom,
                    const std::string& out_path, std::ostream& out) {
    std::string text;
    if (name == "headline") {
        const CostReport rep = cost_report(custom);
        std::ostringstream os;
        os << "attention cost ratio (n=" << custom.n << ", N=" << custom.N
           << ", d=" << custom.d << ", d_s=" << custom.d_s << ", k=" << custom.k
           << ", r=" << custom.r << "): " << detail::ratio_12sig(rep.ratio)
           << " = " << detail::percent_2dec(rep.ratio) << "%\n";
        text = os.str();
    } else {
        text = sweep_csv(sweep(name));
    }
    if (!out_path.empty()) detail::write_text_file(out_path, text);
    out << text;
    return 0;
}

inline int cmd_dump_attention(const std::string& checkpoint_path,
                              int sample_index, const std::string& split,
                              const std::string& out_path, std::ostream& out) {
    LoadedModel lm = load_model(checkpoint_path);
    const Dataset ds = generate(lm.cfg.task, split_from_string(split));
    if (sample_index < 0 ||
        sample_index >= static_cast<int>(ds.examples.size())) {
        throw InputError("sample index " + std::to_string(sample_index) +
                         " out of range for split of size " +
                         std::to_string(ds.examples.size()));
    }
    NoGradScope no_grad;
    const Example& ex = ds.examples[sample_index];
    const TeacherForced tf = teacher_forced(ex.tgt, static_cast<int>(ex.tgt.size()));
    ForwardOptions opts;
    opts.path = AttnPath::Train;
    opts.capture_records = true;
    ForwardResult res = lm.model.forward(ex.src, tf.tgt_in, opts);
    const int r = lm.model.uses_selection() ? lm.cfg.model.selection.r : 1;
    nlohmann::json arr = nlohmann::json::array();
    for (const AttentionRecord& rec : res.records) {
        if (group_leader(rec.layer_index, r) != rec.layer_index) continue;
        arr.push_back(record_to_json(rec));
    }
    const std::string text = arr.dump(2) + "\n";
    if (!out_path.empty()) detail::write_text_file(out_path, text);
    out << text;
    return 0;
}

inline int cmd_sparsity_report(const std::string& checkpoint_path,
                               const std::string& split,
                               const std::string& out_path, std::ostream& out) {
    LoadedModel lm = load_model(checkpoint_path);
    const Dataset ds = generate(lm.cfg.task, split_from_string(split));
    const std::vector<AttentionRecord> records =
        collect_records(lm.model, ds, 32);
    const int r = lm.model.uses_selection() ? lm.cfg.model.selection.r : 1;
    const std::string text =
        sparsity_report_csv(sparsity_report(records, r), lm.model.leaders());
    if (!out_path.empty()) detail::write_text_file(out_path, text);
    out << text;
    return 0;
}

inline int cmd_ablate(const std::string& variant, const ExperimentConfig& cfg,
                      const std::string& out_path, std::ostream& out,
                      std::ostream& log) {
    ExperimentConfig variant_cfg = cfg;
    variant_cfg.model = apply_ablation(cfg.model, variant);

    log << "training full model..." << std::endl;
    TrainedRun full = run_training(cfg, "", &log);
    log << "training variant '" << variant << "'..." << std::endl;
    TrainedRun ablated = run_training(variant_cfg, "", &log);

    const Dataset test_ds = generate(cfg.task, Split::Test);
    EvalMetrics full_m =
        evaluate(full.model, cfg.task, test_ds, AttnPath::Infer, true);
    EvalMetrics abl_m =
        evaluate(ablated.model, cfg.task, test_ds, AttnPath::Infer, true);
    full_m.split = "test";
    abl_m.split = "test";

    nlohmann::ordered_json j;
    j["task"] = to_string(cfg.task.task);
    j["budget_steps"] = cfg.train_steps;
    j["seed"] = cfg.model.seed;
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    auto row = [](const std::string& name, const EvalMetrics& m) {
        nlohmann::ordered_json r;
        r["model"] = name;
        r["attn_cost_percent"] = m.attn_cost_percent;
        r["token_accuracy"] = m.token_accuracy;
        r["exact_accuracy"] = m.exact_accuracy;
        if (m.far_recall >= 0.0) r["far_recall"] = m.far_recall;
        return r;
    };
    rows.push_back(row("full", full_m));
    rows.push_back(row("- " + variant, abl_m));
    j["rows"] = std::move(rows);
    const std::string text = j.dump(2) + "\n";
    if (!out_path.empty()) detail::write_text_file(out_path, text);
    out << text;
    return 0;
}

}  // namespace lasformer
