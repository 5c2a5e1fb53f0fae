#pragma once

// Shared test helpers: random tensors and the central finite-difference
// gradient oracle. The oracle only evaluates the forward path, so it stays
// independent of the backward implementation it is checking.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sonogen/rng.hpp"
#include "sonogen/tensor.hpp"

namespace testutil {

inline sonogen::Tensor random_tensor(sonogen::Shape shape, sonogen::Rng& rng, float lo = -1.0f,
                                     float hi = 1.0f, bool requires_grad = true) {
    return sonogen::Tensor::uniform(std::move(shape), rng, lo, hi, requires_grad);
}

struct FdResult {
    bool ok = true;
    float worst_rel = 0.0f;
    std::string detail;
};

// Compares backward() grads of `f` at `inputs` against central differences.
// Perturbation 1e-3, tolerance |fd - an| <= rtol*max(|fd|,|an|) + atol.
inline FdResult fd_check(const std::function<sonogen::Tensor(const std::vector<sonogen::Tensor>&)>& f,
                         std::vector<sonogen::Tensor> inputs, float h = 1e-3f, float rtol = 1e-3f,
                         float atol = 1e-3f) {
    using sonogen::Tensor;
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    Tensor loss = f(inputs);
    sonogen::backward(loss);

    FdResult res;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        auto& t = inputs[ti];
        const auto analytic = t.grad();
        for (std::size_t i = 0; i < t.size(); ++i) {
            const float orig = t.values()[i];
            t.values()[i] = orig + h;
            const float fp = f(inputs).item();
            t.values()[i] = orig - h;
            const float fm = f(inputs).item();
            t.values()[i] = orig;
            const float fd = (fp - fm) / (2.0f * h);
            const float an = analytic[i];
            const float err = std::fabs(fd - an);
            const float tol = rtol * std::max(std::fabs(fd), std::fabs(an)) + atol;
            const float rel = err / std::max(std::max(std::fabs(fd), std::fabs(an)), 1e-6f);
            res.worst_rel = std::max(res.worst_rel, rel);
            if (err > tol) {
                res.ok = false;
                res.detail = "input " + std::to_string(ti) + " elem " + std::to_string(i) + ": fd=" +
                             std::to_string(fd) + " analytic=" + std::to_string(an);
                return res;
            }
        }
    }
    return res;
}

}  // namespace testutil
