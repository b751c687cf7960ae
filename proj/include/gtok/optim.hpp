#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "gtok/tape.hpp"
#include "gtok/tensor.hpp"

namespace gtok {

/// Named, ordered collection of model parameters. Indices are stable, names
/// unique. Non-trainable entries hold state the optimizer must not touch
/// (batch norm running statistics).
template <typename T>
class ParameterSet {
public:
    int add(std::string name, Tensor<T> value, bool trainable = true) {
        detail::require(index_.find(name) == index_.end(), "params: duplicate name " + name);
        const int idx = static_cast<int>(entries_.size());
        index_[name] = idx;
        entries_.push_back(Entry{std::move(name), std::move(value), trainable});
        return idx;
    }

    int find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? -1 : it->second;
    }

    std::size_t size() const { return entries_.size(); }
    const std::string& name(int i) const { return entries_[static_cast<std::size_t>(i)].name; }
    Tensor<T>& value(int i) { return entries_[static_cast<std::size_t>(i)].value; }
    const Tensor<T>& value(int i) const { return entries_[static_cast<std::size_t>(i)].value; }
    bool trainable(int i) const { return entries_[static_cast<std::size_t>(i)].trainable; }

    std::int64_t numel() const {
        std::int64_t n = 0;
        for (const Entry& e : entries_) {
            n += e.value.numel();
        }
        return n;
    }

    bool all_finite() const {
        for (const Entry& e : entries_) {
            if (!e.value.all_finite()) {
                return false;
            }
        }
        return true;
    }

private:
    struct Entry {
        std::string name;
        Tensor<T> value;
        bool trainable;
    };

    std::vector<Entry> entries_;
    std::map<std::string, int> index_;
};

/// Per-step cache binding parameters to tape leaves. A parameter used many
/// times in one step (shared weights, batch loops) is bound once, so fan-out
/// gradient accumulation on the tape sums all contributions.
template <typename T>
class ParamBinding {
public:
    explicit ParamBinding(ParameterSet<T>& ps) : ps_(&ps) {}

    void reset() { cache_.assign(ps_->size(), Var{}); }

    ParameterSet<T>& params() { return *ps_; }

    Var var(Tape<T>& t, int idx) {
        if (cache_.size() != ps_->size()) {
            cache_.assign(ps_->size(), Var{});
        }
        Var& slot = cache_[static_cast<std::size_t>(idx)];
        if (!slot.valid()) {
            slot = t.leaf(ps_->value(idx), ps_->trainable(idx));
        }
        return slot;
    }

    /// Gradients for every bound trainable parameter, indexed like the set.
    /// Unbound entries come back empty.
    std::vector<Tensor<T>> collect(Tape<T>& t) const {
        std::vector<Tensor<T>> grads(ps_->size());
        for (std::size_t i = 0; i < cache_.size(); ++i) {
            if (cache_[i].valid() && ps_->trainable(static_cast<int>(i))) {
                grads[i] = t.grad(cache_[i]);
            }
        }
        return grads;
    }

private:
    ParameterSet<T>* ps_;
    std::vector<Var> cache_;
};

struct AdamWConfig {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// AdamW with bias correction and decoupled weight decay. step() refuses to
/// apply a non-finite update and reports the refusal; it never repairs one.
template <typename T>
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    const AdamWConfig& config() const { return cfg_; }
    std::int64_t steps() const { return t_; }

    bool step(ParameterSet<T>& ps, const std::vector<Tensor<T>>& grads) {
        detail::require(grads.size() == ps.size(), "adamw: gradient list size mismatch");
        for (std::size_t i = 0; i < grads.size(); ++i) {
            if (!grads[i].empty() && !grads[i].all_finite()) {
                return false;
            }
        }
        if (m_.size() != ps.size()) {
            m_.resize(ps.size());
            v_.resize(ps.size());
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < grads.size(); ++i) {
            if (grads[i].empty() || !ps.trainable(static_cast<int>(i))) {
                continue;
            }
            Tensor<T>& theta = ps.value(static_cast<int>(i));
            Tensor<T>& m = m_[i];
            Tensor<T>& v = v_[i];
            if (m.empty()) {
                m = Tensor<T>(theta.shape());
                v = Tensor<T>(theta.shape());
            }
            const T* g = grads[i].data();
            T* mp = m.data();
            T* vp = v.data();
            T* tp = theta.data();
            const std::int64_t n = theta.numel();
            for (std::int64_t j = 0; j < n; ++j) {
                const double gj = static_cast<double>(g[j]);
                const double mj = cfg_.beta1 * static_cast<double>(mp[j]) + (1.0 - cfg_.beta1) * gj;
                const double vj = cfg_.beta2 * static_cast<double>(vp[j]) + (1.0 - cfg_.beta2) * gj * gj;
                mp[j] = static_cast<T>(mj);
                vp[j] = static_cast<T>(vj);
                const double mhat = mj / bc1;
                const double vhat = vj / bc2;
                tp[j] = static_cast<T>(static_cast<double>(tp[j]) -
                                       cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                                  cfg_.weight_decay * static_cast<double>(tp[j])));
            }
        }
        return true;
    }

private:
    AdamWConfig cfg_;
    std::int64_t t_ = 0;
    std::vector<Tensor<T>> m_, v_;
};

}  // namespace gtok
