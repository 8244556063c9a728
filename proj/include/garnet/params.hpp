#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "garnet/rng.hpp"
#include "garnet/tensor.hpp"

namespace garnet {

// Ordered registry of named trainable tensors. Registration order is fixed
// by module construction and defines the checkpoint layout.
class ParamStore {
public:
    Tensor create(const std::string& name, Shape shape) {
        if (index_.count(name)) throw contract_error("parameter registered twice: " + name);
        Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
        index_[name] = items_.size();
        items_.emplace_back(name, t);
        return t;
    }

    Tensor& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw contract_error("unknown parameter: " + name);
        return items_[it->second].second;
    }

    const Tensor& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw contract_error("unknown parameter: " + name);
        return items_[it->second].second;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    size_t size() const { return items_.size(); }
    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }

    int64_t total_values() const {
        int64_t n = 0;
        for (const auto& [name, t] : items_) n += t.numel();
        return n;
    }

    void zero_all_grads() {
        for (auto& [name, t] : items_) t.zero_grad();
    }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::unordered_map<std::string, size_t> index_;
};

// Kaiming-uniform fan-in fill; biases stay zero, as does anything the caller
// wants identity-at-init behaviour from.
inline void kaiming_uniform_(Tensor& t, int64_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double& v : t.mutable_data()) v = rng.uniform_real(-bound, bound);
}

} // namespace garnet
