#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ehs/tensor.hpp"

namespace ehs {

// A named model weight. Names use dot-separated prefixes ("encoder.conv0.w",
// "decoder.attn.v", ...) so that weight transfer and freezing can select
// whole sub-models by prefix.
struct Parameter {
    std::string name;
    TensorPtr t;
    bool trainable = true;
};

using ParamList = std::vector<Parameter>;

// Scalar counts per top-level prefix (the part before the first '.'), plus
// the grand total. Used to verify what actually lives inside a model.
struct ParamCensus {
    int64_t total = 0;
    std::map<std::string, int64_t> by_prefix;

    int64_t count(const std::string& prefix) const {
        auto it = by_prefix.find(prefix);
        return it == by_prefix.end() ? 0 : it->second;
    }
};

inline ParamCensus parameter_census(const ParamList& params) {
    ParamCensus c;
    for (const auto& p : params) {
        auto dot = p.name.find('.');
        std::string group = dot == std::string::npos ? "other" : p.name.substr(0, dot);
        c.by_prefix[group] += p.t->numel();
        c.total += p.t->numel();
    }
    return c;
}

inline Parameter* find_param(ParamList& params, const std::string& name) {
    for (auto& p : params) {
        if (p.name == name) return &p;
    }
    return nullptr;
}

inline void zero_grads(ParamList& params) {
    for (auto& p : params) p.t->grad.clear();
}

} // namespace ehs
