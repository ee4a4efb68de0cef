#ifndef DCV_PARAMS_HPP
#define DCV_PARAMS_HPP

#include "dcv/autograd.hpp"

#include <map>
#include <string>
#include <vector>

namespace dcv {

/// Ordered name -> parameter registry. Iteration order is lexicographic,
/// which fixes checkpoint layout and hashing order.
template <typename S>
class ParamStore {
public:
    Var<S>& add(const std::string& name, Tensor<S> value) {
        auto [it, inserted] = params_.emplace(name, Var<S>(std::move(value), true));
        if (!inserted) throw ConfigError("duplicate parameter name: " + name);
        return it->second;
    }

    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    const Var<S>& at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }
    Var<S>& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }

    void erase(const std::string& name) { params_.erase(name); }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    std::size_t size() const { return params_.size(); }

    Index total_elements() const {
        Index n = 0;
        for (const auto& [name, v] : params_) n += v.numel();
        return n;
    }

    void set_trainable(bool on) {
        for (auto& [name, v] : params_) v.set_requires_grad(on);
    }

    void zero_grad() {
        for (auto& [name, v] : params_) v.zero_grad();
    }

    /// Deep copy of values; the copy has no graph history.
    ParamStore clone() const {
        ParamStore out;
        for (const auto& [name, v] : params_) out.add(name, v.value()).set_requires_grad(v.requires_grad());
        return out;
    }

    template <typename T>
    ParamStore<T> cast() const {
        ParamStore<T> out;
        for (const auto& [name, v] : params_) out.add(name, v.value().template cast<T>()).set_requires_grad(v.requires_grad());
        return out;
    }

private:
    std::map<std::string, Var<S>> params_;
};

}  // namespace dcv

#endif  // DCV_PARAMS_HPP
