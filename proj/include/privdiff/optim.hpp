#pragma once

#include <map>
#include <string>

#include "privdiff/autodiff.hpp"
#include "privdiff/params.hpp"

namespace privdiff {

// Plain SGD with momentum for the non-private training phases.
struct SgdMomentum {
    double lr = 0.01;
    double momentum = 0.9;
    std::map<std::string, Tensor> velocity;

    void step(ParamStore& params, const GradMap& grads) {
        for (const auto& [name, g] : grads.grads) {
            Tensor& p = params.tensor(name);
            if (!p.same_shape(g)) throw ShapeError("sgd: gradient shape mismatch for " + name);
            auto [it, fresh] = velocity.try_emplace(name, Tensor(p.shape));
            Tensor& v = it->second;
            for (int64_t i = 0; i < p.numel(); ++i) {
                v[i] = momentum * v[i] + g[i];
                p[i] -= lr * v[i];
            }
        }
    }
};

}  // namespace privdiff
