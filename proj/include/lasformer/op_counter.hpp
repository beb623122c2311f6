// Multiply-accumulate counter attached to the forward pass. One unit is one
// fused multiply+add, matching the convention where a dense attention layer
// costs 2*N^2*d (dot products plus weighted sum). Backward passes and
// softmax/normalization arithmetic are not counted.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

#include "lasformer/common.hpp"

namespace lasformer {

struct OpCounter {
    std::map<std::string, std::uint64_t> by_label;
    std::uint64_t total = 0;

    void add(std::string_view label, std::uint64_t n) {
        by_label[std::string(label)] += n;
        total += n;
    }

    std::uint64_t labeled(std::string_view label) const {
        auto it = by_label.find(std::string(label));
        return it == by_label.end() ? 0 : it->second;
    }

    // Sum of all labels starting with `prefix` (e.g. "attn." or "select.").
    std::uint64_t labeled_prefix(std::string_view prefix) const {
        std::uint64_t sum = 0;
        for (const auto& [label, count] : by_label) {
            if (label.size() >= prefix.size() &&
                std::string_view(label).substr(0, prefix.size()) == prefix) {
                sum += count;
            }
        }
        return sum;
    }

    void merge(const OpCounter& other) {
        for (const auto& [label, count] : other.by_label) add(label, count);
    }

    void reset() {
        by_label.clear();
        total = 0;
    }

    bool consistent() const {
        std::uint64_t sum = 0;
        for (const auto& [label, count] : by_label) sum += count;
        return sum == total;
    }
};

namespace detail {
inline thread_local OpCounter* g_counter = nullptr;
}

// Adds n multiply-accumulates under `label` to the active counter, if any.
inline void count_macs(std::string_view label, std::uint64_t n) {
    if (detail::g_counter != nullptr) detail::g_counter->add(label, n);
}

inline OpCounter* active_counter() { return detail::g_counter; }

// RAII scope making `counter` the active per-thread counter.
class CounterScope {
public:
    explicit CounterScope(OpCounter& counter) : prev_(detail::g_counter) {
        detail::g_counter = &counter;
    }
    ~CounterScope() { detail::g_counter = prev_; }
    CounterScope(const CounterScope&) = delete;
    CounterScope& operator=(const CounterScope&) = delete;

private:
    OpCounter* prev_;
};

}  // namespace lasformer
