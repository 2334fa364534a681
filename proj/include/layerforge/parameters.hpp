#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "layerforge/autodiff.hpp"

namespace layerforge {

/// Named, ordered collection of trainable tensors.
template <typename T>
class ParameterSet {
public:
    std::size_t add(std::string name, BasicTensor<T> init) {
        if (!lookup_.emplace(name, names_.size()).second) throw ValidationError("duplicate parameter name: " + name);
        names_.push_back(std::move(name));
        tensors_.push_back(std::move(init));
        return tensors_.size() - 1;
    }

    std::size_t index(std::string_view name) const {
        auto it = lookup_.find(std::string(name));
        if (it == lookup_.end()) throw NotFoundError("no parameter named " + std::string(name));
        return it->second;
    }

    bool contains(std::string_view name) const { return lookup_.count(std::string(name)) != 0; }

    std::size_t size() const { return tensors_.size(); }
    const std::string& name(std::size_t i) const { return names_.at(i); }
    BasicTensor<T>& operator[](std::size_t i) { return tensors_.at(i); }
    const BasicTensor<T>& operator[](std::size_t i) const { return tensors_.at(i); }
    BasicTensor<T>& operator[](std::string_view name) { return tensors_[index(name)]; }
    const BasicTensor<T>& operator[](std::string_view name) const { return tensors_[index(name)]; }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& t : tensors_) n += t.size();
        return n;
    }

    /// Flattened copy of all values, in parameter order.
    std::vector<T> flatten() const {
        std::vector<T> out;
        out.reserve(scalar_count());
        for (const auto& t : tensors_) out.insert(out.end(), t.data().begin(), t.data().end());
        return out;
    }

    template <typename U>
    void assign_flat(std::span<const U> flat) {
        if (flat.size() != scalar_count()) throw ShapeError("assign_flat: size mismatch");
        std::size_t k = 0;
        for (auto& t : tensors_)
            for (auto& x : t.storage()) x = static_cast<T>(flat[k++]);
    }

    template <typename U>
    ParameterSet<U> cast() const {
        ParameterSet<U> out;
        for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], tensors_[i].template cast<U>());
        return out;
    }

    bool bit_equal(const ParameterSet& other) const {
        if (names_ != other.names_) return false;
        for (std::size_t i = 0; i < size(); ++i)
            if (!tensors_[i].bit_equal(other.tensors_[i])) return false;
        return true;
    }

private:
    std::vector<std::string> names_;
    std::vector<BasicTensor<T>> tensors_;
    std::unordered_map<std::string, std::size_t> lookup_;
};

/// Parameters registered as graph leaves, index-aligned with the set.
template <typename T>
std::vector<Var> bind_parameters(Graph<T>& g, const ParameterSet<T>& params) {
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) vars.push_back(g.leaf(params[i]));
    return vars;
}

}  // namespace layerforge
