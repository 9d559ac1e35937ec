#pragma once

#include <cmath>
#include <deque>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "unidiff/autograd.hpp"
#include "unidiff/tensor.hpp"

namespace unidiff {

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;  // allocated only for trainable parameters
    bool trainable = false;
};

// Named parameters with stable indices; copying the store copies the values.
template <typename T>
class ParameterStore {
public:
    int add(std::string name, std::vector<int> shape, bool trainable) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
        Parameter<T> p;
        p.name = std::move(name);
        p.value = Tensor<T>(shape);
        p.trainable = trainable;
        if (trainable) p.grad = Tensor<T>(shape);
        index_[p.name] = static_cast<int>(params_.size());
        params_.push_back(std::move(p));
        return static_cast<int>(params_.size()) - 1;
    }

    Parameter<T>& operator[](int i) { return params_.at(static_cast<std::size_t>(i)); }
    const Parameter<T>& operator[](int i) const { return params_.at(static_cast<std::size_t>(i)); }

    const Parameter<T>* find(std::string_view name) const {
        auto it = index_.find(std::string(name));
        return it == index_.end() ? nullptr : &params_[static_cast<std::size_t>(it->second)];
    }
    Parameter<T>* find(std::string_view name) {
        auto it = index_.find(std::string(name));
        return it == index_.end() ? nullptr : &params_[static_cast<std::size_t>(it->second)];
    }

    std::size_t size() const { return params_.size(); }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) {
            if (p.trainable) p.grad.fill(T{0});
        }
    }

    // Binds parameter i into a graph; trainable ones receive gradients.
    nn::Var bind(nn::Graph<T>& g, int i) {
        Parameter<T>& p = (*this)[i];
        return g.param(p.value, p.trainable ? &p.grad : nullptr);
    }
    nn::Var bind(nn::Graph<T>& g, int i) const {
        return g.param((*this)[i].value, nullptr);
    }

    template <typename U>
    ParameterStore<U> cast() const {
        ParameterStore<U> out;
        for (const auto& p : params_) {
            const int idx = out.add(p.name, p.value.shape(), p.trainable);
            out[idx].value = p.value.template cast<U>();
        }
        return out;
    }

private:
    std::deque<Parameter<T>> params_;
    std::unordered_map<std::string, int> index_;
};

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the default PyTorch layer init.
template <typename T>
void init_fan_in_uniform(Tensor<T>& t, int fan_in, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
}

}  // namespace unidiff
