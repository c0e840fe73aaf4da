#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>

#include "preflab/param_store.hpp"
#include "preflab/rng.hpp"

namespace preflab {

// Central-difference gradient oracle over a ParamStore. `f` must evaluate the
// loss from the store's current parameter values without side effects.
// When `coords_per_tensor` is set, only that many randomly chosen coordinates
// of each tensor are probed (the rest stay zero in the result).
inline std::map<std::string, Tensor> finite_diff_grad(
    const std::function<double()>& f, ParamStore& store, double eps = 1e-4,
    std::optional<std::size_t> coords_per_tensor = std::nullopt, Rng* rng = nullptr) {
    if (eps <= 0.0) throw ContractError("finite_diff_grad needs eps > 0");
    std::map<std::string, Tensor> out;
    for (const std::string& name : store.names()) {
        Tensor& p = store.get(name);
        Tensor g(p.shape, 0.0);
        std::vector<std::size_t> coords;
        if (coords_per_tensor && rng && *coords_per_tensor < p.size()) {
            for (std::size_t k = 0; k < *coords_per_tensor; ++k)
                coords.push_back(rng->uniform_index(p.size()));
        } else {
            coords.resize(p.size());
            for (std::size_t i = 0; i < p.size(); ++i) coords[i] = i;
        }
        for (std::size_t i : coords) {
            double orig = p.data[i];
            p.data[i] = orig + eps;
            double hi = f();
            p.data[i] = orig - eps;
            double lo = f();
            p.data[i] = orig;
            g.data[i] = (hi - lo) / (2.0 * eps);
        }
        out[name] = std::move(g);
    }
    return out;
}

}  // namespace preflab
