#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "peps/checkpoint_io.hpp"
#include "peps/contraction.hpp"
#include "peps/idx_io.hpp"

namespace peps {

struct TrainConfig {
    std::size_t D = 2;
    std::size_t chi = 10;
    std::size_t T = 10;
    double lr = 1e-4;
    std::size_t batch = 100;
    std::size_t epochs = 100;
    std::uint64_t seed = 0;
    bool positivity = false;
    FeatureKind feature = FeatureKind::product;
    std::string optimizer = "adam";
    double svd_eps = 1e-12;
    bool checkpoint_rows = false;
};

/// Numerically stable softmax (max subtraction).
inline std::vector<double> softmax(const std::vector<double>& logits) {
    const double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) sum += (p[i] = std::exp(logits[i] - m));
    for (double& v : p) v /= sum;
    return p;
}

inline double cross_entropy_loss(const std::vector<double>& logits, std::size_t label) {
    const double m = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - m);
    return std::log(sum) - (logits[label] - m);
}

/// Class probabilities for a contraction result: softmax of the log-domain
/// logits log|v_i| + log_scale, which reduces to |v_i| / sum_j |v_j|. The
/// log_scale of the true logit vector values * exp(log_scale) is an additive
/// constant in the log domain and cancels, so the probabilities are
/// invariant under uniform rescaling of the grid and finite for any raw
/// contraction magnitude.
inline std::vector<double> logit_probabilities(const Tensor& v) {
    if (v.rank() != 1) throw DimensionError("logit_probabilities expects rank-1 logits");
    std::vector<double> p(v.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) sum += (p[i] = std::abs(v[i]));
    if (sum <= 0.0) return std::vector<double>(v.size(), 1.0 / double(v.size()));
    for (double& x : p) x /= sum;
    return p;
}

/// One Adam coordinate update; shared by the tensor loop and the tests.
inline void adam_update(double& p, double& m, double& v, double g, std::size_t t, double lr,
                        double beta1, double beta2, double eps) {
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g * g;
    const double mhat = m / (1.0 - std::pow(beta1, static_cast<double>(t)));
    const double vhat = v / (1.0 - std::pow(beta2, static_cast<double>(t)));
    p -= lr * mhat / (std::sqrt(vhat) + eps);
}

/// SGD or Adam over a flat list of parameter tensors.
class Optimizer {
public:
    Optimizer(std::string kind, double lr) : kind_(std::move(kind)), lr_(lr) {
        if (kind_ != "sgd" && kind_ != "adam")
            throw std::invalid_argument("optimizer must be sgd or adam");
    }

    void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
        if (params.size() != grads.size())
            throw DimensionError("optimizer parameter/gradient count mismatch");
        if (kind_ == "sgd") {
            for (std::size_t i = 0; i < params.size(); ++i)
                for (std::size_t j = 0; j < params[i]->size(); ++j)
                    (*params[i])[j] -= lr_ * (*grads[i])[j];
            return;
        }
        if (m_.empty()) {
            for (const Tensor* p : params) {
                m_.push_back(Tensor::zeros(p->shape()));
                v_.push_back(Tensor::zeros(p->shape()));
            }
        }
        ++t_;
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (params[i]->shape() != grads[i]->shape())
                throw DimensionError("optimizer gradient shape mismatch");
            for (std::size_t j = 0; j < params[i]->size(); ++j)
                adam_update((*params[i])[j], m_[i][j], v_[i][j], (*grads[i])[j], t_, lr_,
                            beta1, beta2, eps);
        }
    }

    double lr() const { return lr_; }
    const std::string& kind() const { return kind_; }

    static constexpr double beta1 = 0.9;
    static constexpr double beta2 = 0.999;
    static constexpr double eps = 1e-8;

private:
    std::string kind_;
    double lr_;
    std::vector<Tensor> m_, v_;
    std::size_t t_ = 0;
};

inline std::vector<Tensor*> model_params(Checkpoint& model) {
    std::vector<Tensor*> out;
    for (Tensor& t : model.grid.tensors) out.push_back(&t);
    if (model.conv) {
        out.push_back(&model.conv->kernels);
        out.push_back(&model.conv->biases);
    }
    return out;
}

/// Tape handles for one recording of the model parameters.
struct ParamVars {
    std::vector<Var> sites;
    std::optional<std::pair<Var, Var>> conv;  // kernels, biases
};

inline ParamVars record_params(Tape& tape, const Checkpoint& model, bool trainable) {
    ParamVars pv;
    pv.sites.reserve(model.grid.tensors.size());
    for (const Tensor& t : model.grid.tensors) pv.sites.push_back(tape.leaf(t, trainable));
    if (model.feature == FeatureKind::conv) {
        if (!model.conv) throw std::invalid_argument("conv feature map requires conv parameters");
        pv.conv = {tape.leaf(model.conv->kernels, trainable),
                   tape.leaf(model.conv->biases, trainable)};
    }
    return pv;
}

/// Records one sample's forward pass: feature map, physical-leg absorption,
/// approximate contraction. Returns scale-split logits.
inline TapeLogits forward_sample(Tape& tape, const Checkpoint& model, const ParamVars& pv,
                                 const Image& img, std::size_t chi, const ContractOptions& opts) {
    const std::size_t L = model.grid.L;
    std::vector<Var> feats;
    feats.reserve(L * L);
    if (model.feature == FeatureKind::product) {
        const FeatureGrid fg = product_state_map(img);
        if (fg.rows != L || fg.cols != L)
            throw DimensionError("image does not block to the lattice size");
        for (const Tensor& f : fg.vectors) feats.push_back(tape.constant(f));
    } else {
        const TapeFeatureGrid fg = conv_feature_map(tape, img, pv.conv->first, pv.conv->second);
        if (fg.rows != L || fg.cols != L)
            throw DimensionError("image does not map to the lattice size");
        feats = fg.vectors;
    }
    const AbsorbedGrid ag = absorb_features(tape, model.grid, pv.sites, feats);
    return bidirectional_contract(tape, ag, chi, opts);
}

/// Predicted class: the label with the largest probability |v_i| / sum |v_j|,
/// i.e. the largest magnitude entry.
inline std::size_t argmax_label(const Tensor& v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (std::abs(v[i]) > std::abs(v[best])) best = i;
    return best;
}

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
};

/// Loss and accuracy over a dataset; parameters enter as constants so no
/// backward state is kept.
inline EvalResult evaluate(const Checkpoint& model, const Dataset& data, std::size_t chi,
                           const ContractOptions& opts = {}) {
    if (data.size() == 0) return {};
    double loss = 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        Tape tape;
        const ParamVars pv = record_params(tape, model, false);
        const TapeLogits out = forward_sample(tape, model, pv, data.images[i], chi, opts);
        const Var l = tape.cross_entropy(out.values, data.labels[i]);
        loss += tape.value(l).value();
        if (argmax_label(tape.value(out.values)) == data.labels[i]) ++correct;
    }
    return {loss / data.size(), double(correct) / data.size()};
}

inline std::size_t predict(const Checkpoint& model, const Image& img, std::size_t chi,
                           const ContractOptions& opts = {}) {
    Tape tape;
    const ParamVars pv = record_params(tape, model, false);
    const TapeLogits out = forward_sample(tape, model, pv, img, chi, opts);
    return argmax_label(tape.value(out.values));
}

struct EpochStats {
    double train_loss = 0.0;
    double train_acc = 0.0;
};

/// One pass over the training set in seeded-shuffle order. Each batch is
/// recorded on a single tape so one backward accumulates all sample
/// gradients.
inline EpochStats train_epoch(Checkpoint& model, const Dataset& train, const TrainConfig& cfg,
                              Optimizer& opt, std::size_t epoch) {
    if (train.size() == 0) throw std::invalid_argument("empty training set");
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(cfg.seed * 0x9e3779b97f4a7c15ULL + epoch);
    std::shuffle(order.begin(), order.end(), rng);

    const ContractOptions opts{cfg.svd_eps, cfg.checkpoint_rows};
    std::vector<Tensor*> params = model_params(model);
    double loss_sum = 0.0;
    std::size_t correct = 0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
        const std::size_t stop = std::min(start + cfg.batch, order.size());
        const std::size_t bsz = stop - start;
        Tape tape;
        const ParamVars pv = record_params(tape, model, true);

        std::vector<TapeLogits> outs;
        outs.reserve(bsz);
        for (std::size_t k = start; k < stop; ++k)
            outs.push_back(forward_sample(tape, model, pv, train.images[order[k]], cfg.chi, opts));

        std::optional<Var> total;
        for (std::size_t b = 0; b < bsz; ++b) {
            const std::size_t k = order[start + b];
            const Var l = tape.cross_entropy(outs[b].values, train.labels[k]);
            if (argmax_label(tape.value(outs[b].values)) == train.labels[k]) ++correct;
            total = total ? tape.add(*total, l) : l;
        }
        const Var mean = tape.scale(*total, 1.0 / bsz);
        const double batch_loss = tape.value(mean).value();
        loss_sum += batch_loss * bsz;

        const GradientMap grads = tape.backward(mean);
        std::vector<const Tensor*> gptrs;
        std::vector<Tensor> conv_grads;
        for (std::size_t s = 0; s < pv.sites.size(); ++s) gptrs.push_back(&grads.at(pv.sites[s]));
        if (pv.conv) {
            gptrs.push_back(&grads.at(pv.conv->first));
            gptrs.push_back(&grads.at(pv.conv->second));
        }
        double gmax = 0.0;
        bool finite = std::isfinite(batch_loss);
        for (const Tensor* g : gptrs)
            for (double v : g->data()) {
                if (!std::isfinite(v)) finite = false;
                gmax = std::max(gmax, std::abs(v));
            }
        if (!finite)
            throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) +
                                     " batch " + std::to_string(start / cfg.batch) +
                                     " (max |grad| = " + std::to_string(gmax) + ")");

        opt.step(params, gptrs);
        if (cfg.positivity)
            for (Tensor& t : model.grid.tensors)
                for (double& v : t.data()) v = std::abs(v);
    }
    return {loss_sum / train.size(), double(correct) / train.size()};
}

/// Appends "# key=value" config lines then a CSV header; one row per epoch.
class MetricsWriter {
public:
    MetricsWriter(const std::filesystem::path& path,
                  const std::vector<std::pair<std::string, std::string>>& config)
        : out_(path, std::ios::trunc) {
        if (!out_) throw FormatError("cannot open " + path.string() + " for writing");
        for (const auto& [k, v] : config) out_ << "# " << k << "=" << v << "\n";
        out_ << "epoch,train_loss,train_acc,val_acc,test_acc,seconds\n";
        out_.flush();
    }

    void row(std::size_t epoch, double train_loss, double train_acc, double val_acc,
             double test_acc, double seconds) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "%zu,%.12g,%.12g,%.12g,%.12g,%.3f", epoch, train_loss,
                      train_acc, val_acc, test_acc, seconds);
        out_ << buf << "\n";
        out_.flush();
    }

private:
    std::ofstream out_;
};

}  // namespace peps
