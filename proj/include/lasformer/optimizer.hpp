// Adam with linear learning-rate warmup.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lasformer/common.hpp"
#include "lasformer/tensor.hpp"

namespace lasformer {

struct OptimizerConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int warmup_steps = 100;

    void validate() const {
        if (lr <= 0.0 || beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 ||
            beta2 >= 1.0 || eps <= 0.0 || warmup_steps < 0) {
            throw ConfigError("optimizer: invalid hyperparameters");
        }
    }
};

class Adam {
public:
    explicit Adam(OptimizerConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

    const OptimizerConfig& config() const { return cfg_; }
    long long steps_taken() const { return t_; }

    // Applies one update to every named parameter. Parameters with no
    // gradient buffer are treated as zero-gradient (their moments decay but
    // the values stay put).
    void step(const std::vector<std::string>& names,
              std::map<std::string, Tensor>& params) {
        ++t_;
        const double lr = cfg_.lr * (cfg_.warmup_steps > 0
                                         ? std::min(1.0, double(t_) / cfg_.warmup_steps)
                                         : 1.0);
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (const std::string& name : names) {
            Tensor& p = params.at(name);
            auto& m = m_[name];
            auto& v = v_[name];
            if (m.size() != p.values().size()) {
                m.assign(p.values().size(), 0.0);
                v.assign(p.values().size(), 0.0);
            }
            const bool has_grad = p.has_grad();
            for (size_t i = 0; i < p.values().size(); ++i) {
                const double g = has_grad ? p.grad()[i] : 0.0;
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                p.values()[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    // Serialization access.
    std::map<std::string, std::vector<double>>& moment1() { return m_; }
    std::map<std::string, std::vector<double>>& moment2() { return v_; }
    const std::map<std::string, std::vector<double>>& moment1() const { return m_; }
    const std::map<std::string, std::vector<double>>& moment2() const { return v_; }
    void set_steps_taken(long long t) { t_ = t; }

private:
    OptimizerConfig cfg_;
    long long t_ = 0;
    std::map<std::string, std::vector<double>> m_;
    std::map<std::string, std::vector<double>> v_;
};

}  // namespace lasformer
