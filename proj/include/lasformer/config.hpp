// Declarative experiment configuration: a flat, diff-friendly key = value
// file with dotted sections. Unknown keys are rejected with the offending
// line; the resolved form is written verbatim into every run directory.
#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lasformer/common.hpp"
#include "lasformer/data.hpp"
#include "lasformer/model.hpp"
#include "lasformer/optimizer.hpp"

namespace lasformer {

struct ExperimentConfig {
    ModelConfig model;
    TaskSpec task;
    OptimizerConfig optimizer;
    long long train_steps = 600;
    int batch_size = 8;
    long long eval_every = 200;
    long long checkpoint_every = 0;  // 0: final checkpoint only
    bool report_sparsity = true;
    bool report_records = false;
    std::string out_dir = "runs/default";

    void validate() const {
        // The model's vocabulary is the task's vocabulary.
        if (model.vocab_size != task.vocab_size) {
            throw ConfigError("model vocab is derived from task.vocab_size; "
                              "do not set them apart");
        }
        model.validate();
        task.validate();
        optimizer.validate();
        if (train_steps < 1) throw ConfigError("train.steps must be >= 1");
        if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
        if (eval_every < 0 || checkpoint_every < 0) {
            throw ConfigError("train cadences must be >= 0");
        }
        const int max_src =
            task.task == Task::LongrangeRecall
                ? task.max_distance + 2 * TaskSpec::kNumPairs +
                      TaskSpec::kNumQueries + 2
                : task.max_len + 2;
        if (max_src > model.max_len) {
            throw ConfigError("task sequences (up to " + std::to_string(max_src) +
                              " tokens) exceed model.max_len " +
                              std::to_string(model.max_len));
        }
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

struct KeyBinding {
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

inline long long parse_ll(const std::string& v) {
    long long out;
    auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) {
        throw ConfigError("expected integer, got '" + v + "'");
    }
    return out;
}

inline double parse_d(const std::string& v) {
    double out;
    auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) {
        throw ConfigError("expected number, got '" + v + "'");
    }
    return out;
}

inline bool parse_b(const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("expected true/false, got '" + v + "'");
}

inline const std::map<std::string, KeyBinding>& key_bindings() {
    static const std::map<std::string, KeyBinding> bindings = [] {
        std::map<std::string, KeyBinding> b;
        auto add_int = [&](const std::string& key, auto member) {
            b[key] = {[member](ExperimentConfig& c, const std::string& v) {
                          c.*member = static_cast<std::decay_t<decltype(c.*member)>>(
                              parse_ll(v));
                      },
                      [member](const ExperimentConfig& c) {
                          return std::to_string(c.*member);
                      }};
        };
        (void)add_int;

        auto def = [&](const std::string& key,
                       std::function<void(ExperimentConfig&, const std::string&)> set,
                       std::function<std::string(const ExperimentConfig&)> get) {
            b[key] = {std::move(set), std::move(get)};
        };

        // model.*
        def("model.n_layers",
            [](ExperimentConfig& c, const std::string& v) { c.model.n_layers = int(parse_ll(v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.model.n_layers); });
        def("model.d",
            [](ExperimentConfig& c, const std::string& v) { c.model.d = int(parse_ll(v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.model.d); });
        def("model.heads",
            [](ExperimentConfig& c, const std::string& v) { c.model.heads = int(parse_ll(v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.model.heads); });
        def("model.ffn_dim",
            [](ExperimentConfig& c, const std::string& v) { c.model.ffn_dim = int(parse_ll(v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.model.ffn_dim); });
        def("model.max_len",
            [](ExperimentConfig& c, const std::string& v) { c.model.max_len = int(parse_ll(v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.model.max_len); });
        def("model.dropout",
            [](ExperimentConfig& c, const std::string& v) { c.model.dropout = parse_d(v); },
            [](const ExperimentConfig& c) { return format_double(c.model.dropout); });
        def("model.seed",
            [](ExperimentConfig& c, const std::string& v) {
                c.model.seed = static_cast<std::uint64_t>(parse_ll(v));
            },
            [](const ExperimentConfig& c) { return std::to_string(c.model.seed); });
        def("model.selection_enabled",
            [](ExperimentConfig& c, const std::string& v) { c.model.selection_enabled = parse_b(v); },
            [](const ExperimentConfig& c) { return c.model.selection_enabled ? "true" : "false"; });
        def("model.use_reparam",
            [](ExperimentConfig& c, const std::string& v) { c.model.use_reparam = parse_b(v); },
            [](const ExperimentConfig& c) { return c.model.use_reparam ? "true" : "false"; });
        def("model.fixed_window",
            [](ExperimentConfig& c, const std::string& v) { c.model.fixed_window = parse_b(v); },
            [](const ExperimentConfig& c) { return c.model.fixed_window ? "true" : "false"; });
        def("model.window_length",
            [](ExperimentConfig& c, const std::string& v) { c.model.window_length = int(parse_ll(v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.model.window_length); });

        // selection.*
        def("selection.d_s",
            [](ExperimentConfig& c, const std::string& v) { c.model.selection.d_s = int(parse_ll(v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.model.selection.d_s); });
        def("selection.t",
            [](ExperimentConfig& c, const std::string& v) { c.model.selection.t = parse_d(v); },
            [](const ExperimentConfig& c) { return format_double(c.model.selection.t); });
        def("selection.step",
            [](ExperimentConfig& c, const std::string& v) { c.model.selection.step = parse_d(v); },
            [](const ExperimentConfig& c) { return format_double(c.model.selection.step); });
        def("selection.alpha",
            [](ExperimentConfig& c, const std::string& v) { c.model.selection.alpha = parse_d(v); },
            [](const ExperimentConfig& c) { return format_double(c.model.selection.alpha); });
        def("selection.r",
            [](ExperimentConfig& c, const std::string& v) { c.model.selection.r = int(parse_ll(v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.model.selection.r); });
        def("selection.k_init",
            [](ExperimentConfig& c, const std::string& v) { c.model.selection.k_init = parse_d(v); },
            [](const ExperimentConfig& c) { return format_double(c.model.selection.k_init); });
        def("selection.k_min",
            [](ExperimentConfig& c, const std::string& v) { c.model.selection.k_min = parse_d(v); },
            [](const ExperimentConfig& c) { return format_double(c.model.selection.k_min); });
        def("selection.min_tokens",
            [](ExperimentConfig& c, const std::string& v) { c.model.selection.min_tokens = int(parse_ll(v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.model.selection.min_tokens); });
        def("selection.freeze_threshold",
            [](ExperimentConfig& c, const std::string& v) { c.model.selection.freeze_threshold = parse_d(v); },
            [](const ExperimentConfig& c) { return format_double(c.model.selection.freeze_threshold); });
        def("selection.adaptive",
            [](ExperimentConfig& c, const std::string& v) { c.model.selection.adaptive = parse_b(v); },
            [](const ExperimentConfig& c) { return c.model.selection.adaptive ? "true" : "false"; });
        def("selection.symmetric_kl",
            [](ExperimentConfig& c, const std::string& v) { c.model.selection.symmetric_kl = parse_b(v); },
            [](const ExperimentConfig& c) { return c.model.selection.symmetric_kl ? "true" : "false"; });

        // task.*
        def("task.kind",
            [](ExperimentConfig& c, const std::string& v) { c.task.task = task_from_string(v); },
            [](const ExperimentConfig& c) { return std::string(to_string(c.task.task)); });
        def("task.vocab_size",
            [](ExperimentConfig& c, const std::string& v) {
                c.task.vocab_size = int(parse_ll(v));
                c.model.vocab_size = c.task.vocab_size;
            },
            [](const ExperimentConfig& c) { return std::to_string(c.task.vocab_size); });
        def("task.min_len",
            [](ExperimentConfig& c, const std::string& v) { c.task.min_len = int(parse_ll(v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.task.min_len); });
        def("task.max_len",
            [](ExperimentConfig& c, const std::string& v) { c.task.max_len = int(parse_ll(v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.task.max_len); });
        def("task.min_distance",
            [](ExperimentConfig& c, const std::string& v) { c.task.min_distance = int(parse_ll(v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.task.min_distance); });
        def("task.max_distance",
            [](ExperimentConfig& c, const std::string& v) { c.task.max_distance = int(parse_ll(v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.task.max_distance); });
        def("task.seed",
            [](ExperimentConfig& c, const std::string& v) {
                c.task.seed = static_cast<std::uint64_t>(parse_ll(v));
            },
            [](const ExperimentConfig& c) { return std::to_string(c.task.seed); });
        def("task.n_train",
            [](ExperimentConfig& c, const std::string& v) { c.task.n_train = int(parse_ll(v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.task.n_train); });
        def("task.n_valid",
            [](ExperimentConfig& c, const std::string& v) { c.task.n_valid = int(parse_ll(v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.task.n_valid); });
        def("task.n_test",
            [](ExperimentConfig& c, const std::string& v) { c.task.n_test = int(parse_ll(v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.task.n_test); });

        // optimizer.*
        def("optimizer.lr",
            [](ExperimentConfig& c, const std::string& v) { c.optimizer.lr = parse_d(v); },
            [](const ExperimentConfig& c) { return format_double(c.optimizer.lr); });
        def("optimizer.beta1",
            [](ExperimentConfig& c, const std::string& v) { c.optimizer.beta1 = parse_d(v); },
            [](const ExperimentConfig& c) { return format_double(c.optimizer.beta1); });
        def("optimizer.beta2",
            [](ExperimentConfig& c, const std::string& v) { c.optimizer.beta2 = parse_d(v); },
            [](const ExperimentConfig& c) { return format_double(c.optimizer.beta2); });
        def("optimizer.eps",
            [](ExperimentConfig& c, const std::string& v) { c.optimizer.eps = parse_d(v); },
            [](const ExperimentConfig& c) { return format_double(c.optimizer.eps); });
        def("optimizer.warmup_steps",
            [](ExperimentConfig& c, const std::string& v) { c.optimizer.warmup_steps = int(parse_ll(v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.optimizer.warmup_steps); });

        // train.* and report.*
        def("train.steps",
            [](ExperimentConfig& c, const std::string& v) { c.train_steps = parse_ll(v); },
            [](const ExperimentConfig& c) { return std::to_string(c.train_steps); });
        def("train.batch_size",
            [](ExperimentConfig& c, const std::string& v) { c.batch_size = int(parse_ll(v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.batch_size); });
        def("train.eval_every",
            [](ExperimentConfig& c, const std::string& v) { c.eval_every = parse_ll(v); },
            [](const ExperimentConfig& c) { return std::to_string(c.eval_every); });
        def("train.checkpoint_every",
            [](ExperimentConfig& c, const std::string& v) { c.checkpoint_every = parse_ll(v); },
            [](const ExperimentConfig& c) { return std::to_string(c.checkpoint_every); });
        def("report.sparsity",
            [](ExperimentConfig& c, const std::string& v) { c.report_sparsity = parse_b(v); },
            [](const ExperimentConfig& c) { return c.report_sparsity ? "true" : "false"; });
        def("report.records",
            [](ExperimentConfig& c, const std::string& v) { c.report_records = parse_b(v); },
            [](const ExperimentConfig& c) { return c.report_records ? "true" : "false"; });
        def("out.dir",
            [](ExperimentConfig& c, const std::string& v) { c.out_dir = v; },
            [](const ExperimentConfig& c) { return c.out_dir; });
        return b;
    }();
    return bindings;
}

// Serialization order: stable, grouped by section.
inline const std::vector<std::string>& key_order() {
    static const std::vector<std::string> order = {
        "model.n_layers", "model.d", "model.heads", "model.ffn_dim",
        "model.max_len", "model.dropout", "model.seed",
        "model.selection_enabled", "model.use_reparam", "model.fixed_window",
        "model.window_length",
        "selection.d_s", "selection.t", "selection.step", "selection.alpha",
        "selection.r", "selection.k_init", "selection.k_min",
        "selection.min_tokens", "selection.freeze_threshold",
        "selection.adaptive", "selection.symmetric_kl",
        "task.kind", "task.vocab_size", "task.min_len", "task.max_len",
        "task.min_distance", "task.max_distance", "task.seed", "task.n_train",
        "task.n_valid", "task.n_test",
        "optimizer.lr", "optimizer.beta1", "optimizer.beta2", "optimizer.eps",
        "optimizer.warmup_steps",
        "train.steps", "train.batch_size", "train.eval_every",
        "train.checkpoint_every",
        "report.sparsity", "report.records",
        "out.dir",
    };
    return order;
}

}  // namespace detail

inline void apply_config_line(ExperimentConfig& cfg, const std::string& key,
                              const std::string& value, int line_no) {
    const auto& bindings = detail::key_bindings();
    auto it = bindings.find(key);
    if (it == bindings.end()) {
        throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" +
                          key + "'");
    }
    try {
        it->second.set(cfg, value);
    } catch (const ConfigError& e) {
        throw ConfigError("line " + std::to_string(line_no) + ": key '" + key +
                          "': " + e.what());
    }
}

inline ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(line_no) +
                              ": expected 'key = value', got '" + line + "'");
        }
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty() || value.empty()) {
            throw ConfigError("line " + std::to_string(line_no) +
                              ": empty key or value");
        }
        apply_config_line(cfg, key, value, line_no);
    }
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

// KEY=VALUE override (repeatable CLI flag).
inline void apply_override(ExperimentConfig& cfg, const std::string& kv) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("override must be KEY=VALUE, got '" + kv + "'");
    }
    apply_config_line(cfg, detail::trim(kv.substr(0, eq)),
                      detail::trim(kv.substr(eq + 1)), 0);
}

// Canonical resolved form; parse(serialize(c)) reproduces c exactly.
inline std::string serialize_config(const ExperimentConfig& cfg) {
    const auto& bindings = detail::key_bindings();
    std::ostringstream out;
    for (const std::string& key : detail::key_order()) {
        out << key << " = " << bindings.at(key).get(cfg) << "\n";
    }
    return out.str();
}

}  // namespace lasformer
