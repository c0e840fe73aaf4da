#pragma once

#include <map>
#include <string>
#include <vector>

#include "preflab/errors.hpp"
#include "preflab/tensor.hpp"

namespace preflab {

// Named parameter tensors with per-name accumulated gradients.
// std::map keeps iteration order stable, which keeps every run and every
// serialization deterministic.
class ParamStore {
  public:
    void add(const std::string& name, Tensor t) {
        if (entries_.count(name)) throw ConfigError("duplicate parameter: " + name);
        grads_[name] = Tensor(t.shape, 0.0);
        entries_[name] = std::move(t);
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    Tensor& get(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }
    const Tensor& get(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }

    Tensor& grad(const std::string& name) {
        auto it = grads_.find(name);
        if (it == grads_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }
    const Tensor& grad(const std::string& name) const {
        auto it = grads_.find(name);
        if (it == grads_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }

    void accumulate(const std::string& name, const Tensor& g) {
        Tensor& dst = grad(name);
        if (!dst.same_shape(g))
            throw ShapeError("gradient shape " + g.shape_str() + " for " + name +
                             " does not match parameter " + dst.shape_str());
        for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += g.data[i];
    }

    void zero_grad() {
        for (auto& [name, g] : grads_) g.fill(0.0);
    }

    void remove(const std::string& name) {
        entries_.erase(name);
        grads_.erase(name);
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [name, t] : entries_) out.push_back(name);
        return out;
    }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& [name, t] : entries_) n += t.size();
        return n;
    }

    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

  private:
    std::map<std::string, Tensor> entries_;
    std::map<std::string, Tensor> grads_;
};

}  // namespace preflab
