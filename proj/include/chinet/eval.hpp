#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "chinet/data.hpp"
#include "chinet/model.hpp"
#include "chinet/parallel.hpp"

namespace chinet {

struct XentResult {
    double loss = 0.0;
    Vector grad; // softmax − one_hot
};

/// Max-subtracted softmax cross-entropy and its gradient with respect to the logits.
inline XentResult softmax_xent(std::span<const double> logits, int label)
{
    if (label < 0 || static_cast<std::size_t>(label) >= logits.size())
        throw DimensionError("softmax_xent: label out of range");
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    XentResult r;
    r.loss = std::log(z) - (logits[static_cast<std::size_t>(label)] - mx);
    r.grad.resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) r.grad[i] = std::exp(logits[i] - mx) / z;
    r.grad[static_cast<std::size_t>(label)] -= 1.0;
    return r;
}

inline std::size_t argmax(std::span<const double> v)
{
    return static_cast<std::size_t>(std::distance(v.begin(), std::max_element(v.begin(), v.end())));
}

struct EvalResult {
    double accuracy = 0.0;
    double loss = 0.0;
    std::vector<std::size_t> predictions;
};

/// Accuracy and mean cross-entropy of a logit function over a dataset. Inputs are never perturbed.
template <class LogitFn>
EvalResult evaluate_with(LogitFn&& logits_of, const Dataset& ds)
{
    EvalResult r;
    const std::size_t n = ds.size();
    r.predictions.assign(n, 0);
    std::vector<double> losses(n, 0.0);
    parallel_for(n, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const Vector logits = logits_of(ds.image(i));
            r.predictions[i] = argmax(logits);
            losses[i] = softmax_xent(logits, ds.labels[i]).loss;
        }
    });
    std::size_t correct = 0;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        correct += r.predictions[i] == static_cast<std::size_t>(ds.labels[i]);
        total += losses[i];
    }
    if (n > 0) {
        r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
        r.loss = total / static_cast<double>(n);
    }
    return r;
}

inline EvalResult evaluate(const ChiNet& net, const Dataset& ds)
{
    if (ds.size() > 0 && ds.input_dim() != net.input_dim())
        throw DimensionError("evaluate: dataset input dim " + std::to_string(ds.input_dim()) +
                             " != model input dim " + std::to_string(net.input_dim()));
    if (ds.num_classes() > net.num_classes())
        throw DimensionError("evaluate: dataset has more classes than the model outputs");
    return evaluate_with([&net](std::span<const double> x) { return forward(net, x); }, ds);
}

} // namespace chinet
