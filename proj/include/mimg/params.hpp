#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "mimg/autodiff.hpp"

namespace mimg {

template <class T>
struct ParamT {
    std::string name;
    VarT<T> var;
    bool trainable = true;
};

// Flat registry of named parameters. Insertion order is stable and defines
// both the optimizer slot order and the checkpoint blob order.
template <class T>
class ParamStoreT {
public:
    VarT<T> add(const std::string& name, TensorT<T> init, bool trainable = true) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        VarT<T> v = VarT<T>::leaf(std::move(init), trainable);
        index_[name] = items_.size();
        items_.push_back(ParamT<T>{name, v, trainable});
        return v;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    // Drops a parameter (used when adapters are folded away). Remaining
    // insertion order is preserved.
    void remove(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        items_.erase(items_.begin() + static_cast<std::ptrdiff_t>(it->second));
        index_.clear();
        for (size_t i = 0; i < items_.size(); ++i) index_[items_[i].name] = i;
    }

    ParamT<T>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return items_[it->second];
    }
    const ParamT<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return items_[it->second];
    }

    void set_trainable(const std::string& name, bool trainable) {
        auto& p = get(name);
        p.trainable = trainable;
        p.var.node()->requires_grad = trainable;
    }

    std::vector<ParamT<T>>& items() { return items_; }
    const std::vector<ParamT<T>>& items() const { return items_; }
    size_t size() const { return items_.size(); }

    // Number of scalar elements in trainable parameters.
    int64_t count_trainable() const {
        int64_t n = 0;
        for (const auto& p : items_)
            if (p.trainable) n += p.var.value().numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : items_)
            if (p.trainable) p.var.zero_grad();
    }

private:
    std::vector<ParamT<T>> items_;
    std::unordered_map<std::string, size_t> index_;
};

using ParamStore = ParamStoreT<float>;

} // namespace mimg
