#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "chinet/data.hpp"
#include "chinet/errors.hpp"
#include "chinet/eval.hpp"
#include "chinet/linalg.hpp"
#include "chinet/model.hpp"

namespace chinet {

struct TrainConfig {
    double learning_rate = 1e-3;
    double weight_decay = 1.0;
    std::size_t batch_size = 2048;
    std::size_t epochs = 20;
    double noise_sigma = 0.3;
    NoiseMode noise_mode = NoiseMode::per_pixel_std;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double norm_momentum = 0.1;
    std::size_t depth = 3;
    std::size_t width = 64;
    bool bias_lane = true;   // coordinate 0 of every bond is held constant
    double bias_init = 0.0;  // initial constant column of A_i, B_i (0: random like the rest)
    std::uint64_t seed = 0;

    /// Bond dimensions h_1 … h_{L+1}.
    std::vector<std::size_t> hidden() const { return std::vector<std::size_t>(depth + 1, width); }

    void validate() const
    {
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
            throw ConfigError("config key 'learning_rate' must be a non-negative number");
        if (!(weight_decay >= 0.0)) throw ConfigError("config key 'weight_decay' must be non-negative");
        if (batch_size == 0) throw ConfigError("config key 'batch_size' must be positive");
        if (width == 0) throw ConfigError("config key 'width' must be positive");
        if (!(noise_sigma >= 0.0)) throw ConfigError("config key 'noise_sigma' must be non-negative");
        if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("config key 'beta1' must be in [0, 1)");
        if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("config key 'beta2' must be in [0, 1)");
        if (!(adam_eps > 0.0)) throw ConfigError("config key 'adam_eps' must be positive");
        if (!(norm_momentum > 0.0 && norm_momentum <= 1.0))
            throw ConfigError("config key 'norm_momentum' must be in (0, 1]");
        if (!std::isfinite(bias_init)) throw ConfigError("config key 'bias_init' must be finite");
        if (bias_lane && width < 2) throw ConfigError("config key 'width' must be at least 2 with bias_lane");
    }

    /// Every key with its current value, in a fixed order.
    std::vector<std::pair<std::string, std::string>> entries() const
    {
        auto num = [](double v) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.17g", v);
            return std::string(buf);
        };
        return {
            {"learning_rate", num(learning_rate)},
            {"weight_decay", num(weight_decay)},
            {"batch_size", std::to_string(batch_size)},
            {"epochs", std::to_string(epochs)},
            {"noise_sigma", num(noise_sigma)},
            {"noise_mode", noise_mode == NoiseMode::per_pixel_std ? "pixel" : "l2"},
            {"beta1", num(beta1)},
            {"beta2", num(beta2)},
            {"adam_eps", num(adam_eps)},
            {"norm_momentum", num(norm_momentum)},
            {"depth", std::to_string(depth)},
            {"width", std::to_string(width)},
            {"bias_lane", bias_lane ? "true" : "false"},
            {"bias_init", num(bias_init)},
            {"seed", std::to_string(seed)},
        };
    }

    /// Sets one key from its text form. Unknown keys and malformed values throw ConfigError naming the key.
    void set(const std::string& key, const std::string& value)
    {
        auto real = [&]() {
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(value, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || used != value.size())
                throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as a number");
            return v;
        };
        auto count = [&]() -> std::uint64_t {
            if (value.empty() || value.find_first_not_of("0123456789") != std::string::npos)
                throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as a non-negative integer");
            try {
                return std::stoull(value);
            } catch (const std::exception&) {
                throw ConfigError("config key '" + key + "': value out of range");
            }
        };
        if (key == "learning_rate") learning_rate = real();
        else if (key == "weight_decay") weight_decay = real();
        else if (key == "batch_size") batch_size = count();
        else if (key == "epochs") epochs = count();
        else if (key == "noise_sigma") noise_sigma = real();
        else if (key == "noise_mode") {
            if (value == "pixel") noise_mode = NoiseMode::per_pixel_std;
            else if (value == "l2") noise_mode = NoiseMode::expected_l2_norm;
            else throw ConfigError("config key 'noise_mode': expected 'pixel' or 'l2', got '" + value + "'");
        }
        else if (key == "beta1") beta1 = real();
        else if (key == "beta2") beta2 = real();
        else if (key == "adam_eps") adam_eps = real();
        else if (key == "norm_momentum") norm_momentum = real();
        else if (key == "depth") depth = count();
        else if (key == "width") width = count();
        else if (key == "bias_lane") {
            if (value == "true" || value == "1") bias_lane = true;
            else if (value == "false" || value == "0") bias_lane = false;
            else throw ConfigError("config key 'bias_lane': expected true or false, got '" + value + "'");
        }
        else if (key == "bias_init") bias_init = real();
        else if (key == "seed") seed = count();
        else throw ConfigError("unknown config key '" + key + "'");
    }
};

/// key = value lines; '#' starts a comment.
inline void parse_config(std::istream& in, TrainConfig& cfg)
{
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    };
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    cfg.validate();
}

inline TrainConfig parse_config(const std::string& text)
{
    TrainConfig cfg;
    std::istringstream in(text);
    parse_config(in, cfg);
    return cfg;
}

// ---------------------------------------------------------------------------------------------
// normalisation

/// Running RMS scalar of one layer's activations.
struct NormState {
    double running = 1.0;
    bool initialised = false;
    double momentum = 0.1;

    void update(double s)
    {
        running = initialised ? (1.0 - momentum) * running + momentum * s : s;
        initialised = true;
    }
};

inline constexpr double kNormGuard = 1e-12;

/// Divides the batch (one row per sample) by its RMS statistic mean_n ‖a_n‖/√h in training
/// mode (and folds it into the running average), or by the running average in eval mode.
/// Returns the divisor used (1 when the guard passes the batch through). `batch_stat` is set
/// when the divisor is the batch statistic, i.e. when it depends on the activations.
inline double rms_norm_apply(Matrix& act, NormState& state, bool training, bool* batch_stat = nullptr)
{
    if (batch_stat) *batch_stat = false;
    double s = state.running;
    if (training) {
        if (act.rows() == 0 || act.cols() == 0) return 1.0;
        double acc = 0.0;
        for (std::size_t n = 0; n < act.rows(); ++n) acc += norm2(act.row(n));
        s = acc / static_cast<double>(act.rows()) / std::sqrt(static_cast<double>(act.cols()));
        if (!(s >= kNormGuard)) return 1.0;
        state.update(s);
        if (batch_stat) *batch_stat = true;
    } else if (!(s >= kNormGuard)) {
        return 1.0;
    }
    act *= 1.0 / s;
    return s;
}

/// Turns dz, the gradient at the normalised output z = y/s, into the gradient at y. With a batch
/// statistic s = mean_n ‖y_n‖/√h this is (dz_n − S/(N√h)·z_n/‖z_n‖)/s with S = Σ_m ⟨dz_m, z_m⟩;
/// with a fixed divisor it is dz/s.
inline void rms_norm_backward(Matrix& dz, const Matrix& z, double s, bool batch_stat)
{
    const double inv = 1.0 / s;
    if (batch_stat && z.rows() > 0) {
        double total = 0.0;
        for (std::size_t k = 0; k < dz.size(); ++k) total += dz.data()[k] * z.data()[k];
        const double coef = total / (static_cast<double>(z.rows()) * std::sqrt(static_cast<double>(z.cols())));
        for (std::size_t n = 0; n < z.rows(); ++n) {
            const double len = norm2(z.row(n));
            if (len == 0.0) continue;
            auto d = dz.row(n);
            const auto zn = z.row(n);
            for (std::size_t k = 0; k < d.size(); ++k) d[k] -= coef * zn[k] / len;
        }
    }
    dz *= inv;
}

// ---------------------------------------------------------------------------------------------
// χ-net parameters, batch forward and backward

/// Trainable χ-net: embedding, factored cores (A_i, B_i) and unembedding.
struct ChiParams {
    Matrix e;
    std::vector<Matrix> a;
    std::vector<Matrix> b;
    Matrix u;

    std::size_t depth() const noexcept { return a.size(); }

    static ChiParams from_net(const ChiNet& net)
    {
        ChiParams p;
        p.e = net.embedding();
        for (const Core& c : net.cores()) {
            const auto* f = std::get_if<FactoredCore>(&c);
            if (f == nullptr) throw DimensionError("ChiParams: training needs factored cores");
            p.a.push_back(f->a);
            p.b.push_back(f->b);
        }
        p.u = net.unembedding();
        return p;
    }

    ChiNet to_net() const
    {
        std::vector<Core> cores;
        for (std::size_t i = 0; i < depth(); ++i) cores.emplace_back(FactoredCore{a[i], b[i]});
        return ChiNet(e, std::move(cores), u);
    }

    /// Fixed order: e, A_1, B_1, …, A_L, B_L, u.
    std::vector<Matrix*> tensors()
    {
        std::vector<Matrix*> out{&e};
        for (std::size_t i = 0; i < depth(); ++i) {
            out.push_back(&a[i]);
            out.push_back(&b[i]);
        }
        out.push_back(&u);
        return out;
    }
};

enum class NormMode { off, train, eval };

/// Bias-augmented copy of a batch: column 0 is 1.
inline Matrix augment_batch(const Matrix& x)
{
    Matrix h(x.rows(), x.cols() + 1);
    for (std::size_t n = 0; n < x.rows(); ++n) {
        h(n, 0) = 1.0;
        std::copy(x.row(n).begin(), x.row(n).end(), h.row(n).begin() + 1);
    }
    return h;
}

struct ChiCache {
    Matrix input;               // augmented batch
    std::vector<Matrix> z;      // z[0] = bond 1, …, z[L] = bond L+1 (after normalisation)
    std::vector<Matrix> p, q;   // A_i z, B_i z per core
    std::vector<double> scale;  // divisor applied after each core
    std::vector<char> batch_stat;
    Matrix logits;
};

inline ChiCache chi_forward_batch(const ChiParams& params, const Matrix& x, std::vector<NormState>* norms, NormMode mode)
{
    if (x.cols() + 1 != params.e.cols())
        throw DimensionError("chi_forward_batch: batch has " + std::to_string(x.cols()) + " features, model expects " +
                             std::to_string(params.e.cols() - 1));
    ChiCache c;
    c.input = augment_batch(x);
    c.z.push_back(matmul_nt(c.input, params.e));
    for (std::size_t i = 0; i < params.depth(); ++i) {
        Matrix p = matmul_nt(c.z.back(), params.a[i]);
        Matrix q = matmul_nt(c.z.back(), params.b[i]);
        Matrix y(p.rows(), p.cols());
        for (std::size_t k = 0; k < y.size(); ++k) y.data()[k] = p.data()[k] * q.data()[k];
        double s = 1.0;
        bool live = false;
        if (mode != NormMode::off) s = rms_norm_apply(y, (*norms)[i], mode == NormMode::train, &live);
        c.p.push_back(std::move(p));
        c.q.push_back(std::move(q));
        c.scale.push_back(s);
        c.batch_stat.push_back(live);
        c.z.push_back(std::move(y));
    }
    c.logits = matmul_nt(c.z.back(), params.u);
    return c;
}

/// Gradients of Σ_n ⟨dlogits_n, logits_n⟩ with respect to every parameter, differentiating
/// through batch statistics where the forward pass used them.
inline ChiParams chi_backward(const ChiParams& params, const ChiCache& c, const Matrix& dlogits)
{
    ChiParams g;
    g.a.resize(params.depth());
    g.b.resize(params.depth());
    g.u = matmul_tn(dlogits, c.z.back());
    Matrix dz = matmul(dlogits, params.u);
    for (std::size_t i = params.depth(); i-- > 0;) {
        rms_norm_backward(dz, c.z[i + 1], c.scale[i], c.batch_stat[i]);
        Matrix dp(dz.rows(), dz.cols());
        Matrix dq(dz.rows(), dz.cols());
        for (std::size_t k = 0; k < dz.size(); ++k) {
            const double dy = dz.data()[k];
            dp.data()[k] = dy * c.q[i].data()[k];
            dq.data()[k] = dy * c.p[i].data()[k];
        }
        g.a[i] = matmul_tn(dp, c.z[i]);
        g.b[i] = matmul_tn(dq, c.z[i]);
        Matrix next = matmul(dp, params.a[i]);
        const Matrix viab = matmul(dq, params.b[i]);
        for (std::size_t k = 0; k < next.size(); ++k) next.data()[k] += viab.data()[k];
        dz = std::move(next);
    }
    g.e = matmul_tn(dz, c.input);
    return g;
}

struct BatchLoss {
    double loss = 0.0;   // mean cross-entropy
    Matrix dlogits;      // gradient of the mean loss
    std::size_t correct = 0;
};

inline BatchLoss batch_xent(const Matrix& logits, std::span<const int> labels)
{
    BatchLoss r;
    r.dlogits = Matrix(logits.rows(), logits.cols());
    const double inv_n = logits.rows() ? 1.0 / static_cast<double>(logits.rows()) : 0.0;
    for (std::size_t n = 0; n < logits.rows(); ++n) {
        const XentResult x = softmax_xent(logits.row(n), labels[n]);
        r.loss += x.loss * inv_n;
        r.correct += argmax(logits.row(n)) == static_cast<std::size_t>(labels[n]);
        for (std::size_t k = 0; k < x.grad.size(); ++k) r.dlogits(n, k) = x.grad[k] * inv_n;
    }
    return r;
}

/// Mean batch loss and its gradient (norm off: the plain function the analysis sees).
inline std::pair<double, ChiParams> chi_loss_grad(const ChiParams& params, const Matrix& x, std::span<const int> labels,
                                                  std::vector<NormState>* norms = nullptr, NormMode mode = NormMode::off)
{
    const ChiCache c = chi_forward_batch(params, x, norms, mode);
    const BatchLoss l = batch_xent(c.logits, labels);
    return {l.loss, chi_backward(params, c, l.dlogits)};
}

/// Contracts each running scalar 1/s_i into the layer downstream of core i: both factors of the
/// next core get 1/s (the next core is quadratic in its input), the unembedding gets 1/s.
inline ChiNet fold_norm(const ChiParams& params, const std::vector<NormState>& norms)
{
    if (norms.size() != params.depth()) throw DimensionError("fold_norm: one NormState per core expected");
    ChiParams p = params;
    for (std::size_t i = 0; i < p.depth(); ++i) {
        const double s = norms[i].running;
        if (!(s >= kNormGuard)) continue;
        if (i + 1 < p.depth()) {
            p.a[i + 1] *= 1.0 / s;
            p.b[i + 1] *= 1.0 / s;
        } else {
            p.u *= 1.0 / s;
        }
    }
    return p.to_net();
}

/// Holds coordinate 0 of every bond at a constant: e maps the input bias to it, and A_i, B_i
/// copy it, so each core sees (c, z) and can form linear terms c·z.
inline void pin_bias_lane(ChiParams& p)
{
    auto unit_row = [](Matrix& m) {
        for (double& v : m.row(0)) v = 0.0;
        m(0, 0) = 1.0;
    };
    unit_row(p.e);
    for (std::size_t i = 0; i < p.depth(); ++i) {
        unit_row(p.a[i]);
        unit_row(p.b[i]);
    }
}

/// Random factored χ-net for cfg (seeded from cfg.seed), with the bias lane and constant
/// column applied.
inline ChiNet initial_chinet(std::size_t input_dim, std::size_t classes, const TrainConfig& cfg)
{
    cfg.validate();
    std::seed_seq seq{cfg.seed, std::uint64_t{0x1417}};
    std::mt19937_64 rng(seq);
    const std::vector<std::size_t> hidden = cfg.hidden();
    ChiParams p = ChiParams::from_net(random_chinet(input_dim, hidden, classes, rng));
    if (cfg.bias_init != 0.0)
        for (std::size_t i = 0; i < p.depth(); ++i)
            for (std::size_t l = 0; l < p.a[i].rows(); ++l) {
                p.a[i](l, 0) = cfg.bias_init;
                p.b[i](l, 0) = cfg.bias_init;
            }
    if (cfg.bias_lane) pin_bias_lane(p);
    return p.to_net();
}

// ---------------------------------------------------------------------------------------------
// ReLU baseline

/// x → W_in x + b_in, then per layer z → norm(relu(W_i z + b_i)), then logits U z + c.
/// Zero layers is the linear model.
struct MlpParams {
    Matrix w_in, b_in;          // b_* are 1 × h rows
    std::vector<Matrix> w, b;
    Matrix u, c;
    std::vector<NormState> norms;

    std::size_t depth() const noexcept { return w.size(); }

    std::vector<Matrix*> tensors()
    {
        std::vector<Matrix*> out{&w_in, &b_in};
        for (std::size_t i = 0; i < depth(); ++i) {
            out.push_back(&w[i]);
            out.push_back(&b[i]);
        }
        out.push_back(&u);
        out.push_back(&c);
        return out;
    }
};

template <class Rng>
MlpParams random_mlp(std::size_t input_dim, std::span<const std::size_t> hidden, std::size_t classes, Rng& rng,
                     double momentum = 0.1)
{
    if (hidden.empty()) throw DimensionError("random_mlp: need at least one width");
    auto fill = [&rng](std::size_t rows, std::size_t cols) {
        Matrix m(rows, cols);
        const double bound = std::sqrt(1.0 / static_cast<double>(std::max<std::size_t>(cols, 1)));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (double& v : m.data()) v = dist(rng);
        return m;
    };
    MlpParams p;
    p.w_in = fill(hidden[0], input_dim);
    p.b_in = Matrix(1, hidden[0]);
    for (std::size_t i = 1; i < hidden.size(); ++i) {
        p.w.push_back(fill(hidden[i], hidden[i - 1]));
        p.b.emplace_back(1, hidden[i]);
        p.norms.push_back(NormState{1.0, false, momentum});
    }
    p.u = fill(classes, hidden.back());
    p.c = Matrix(1, classes);
    return p;
}

namespace detail {

inline void add_bias(Matrix& m, const Matrix& bias)
{
    for (std::size_t n = 0; n < m.rows(); ++n)
        for (std::size_t k = 0; k < m.cols(); ++k) m(n, k) += bias(0, k);
}

inline Matrix column_sums(const Matrix& m)
{
    Matrix s(1, m.cols());
    for (std::size_t n = 0; n < m.rows(); ++n)
        for (std::size_t k = 0; k < m.cols(); ++k) s(0, k) += m(n, k);
    return s;
}

} // namespace detail

struct MlpCache {
    Matrix input;
    std::vector<Matrix> z;     // z[0] after the input layer, z[i] after hidden layer i
    std::vector<Matrix> pre;   // pre-activation per hidden layer
    std::vector<double> scale;
    std::vector<char> batch_stat;
    Matrix logits;
};

inline MlpCache mlp_forward_batch(MlpParams& params, const Matrix& x, NormMode mode)
{
    if (x.cols() != params.w_in.cols()) throw DimensionError("mlp_forward_batch: input dim mismatch");
    MlpCache c;
    c.input = x;
    Matrix z = matmul_nt(x, params.w_in);
    detail::add_bias(z, params.b_in);
    c.z.push_back(std::move(z));
    for (std::size_t i = 0; i < params.depth(); ++i) {
        Matrix pre = matmul_nt(c.z.back(), params.w[i]);
        detail::add_bias(pre, params.b[i]);
        Matrix y = pre;
        for (double& v : y.data()) v = std::max(v, 0.0);
        double s = 1.0;
        bool live = false;
        if (mode != NormMode::off) s = rms_norm_apply(y, params.norms[i], mode == NormMode::train, &live);
        c.pre.push_back(std::move(pre));
        c.scale.push_back(s);
        c.batch_stat.push_back(live);
        c.z.push_back(std::move(y));
    }
    c.logits = matmul_nt(c.z.back(), params.u);
    detail::add_bias(c.logits, params.c);
    return c;
}

/// Gradients in the same layout as params.tensors().
inline std::vector<Matrix> mlp_backward(const MlpParams& params, const MlpCache& c, const Matrix& dlogits)
{
    std::vector<Matrix> gw(params.depth()), gb(params.depth());
    Matrix gu = matmul_tn(dlogits, c.z.back());
    Matrix gc = detail::column_sums(dlogits);
    Matrix dz = matmul(dlogits, params.u);
    for (std::size_t i = params.depth(); i-- > 0;) {
        rms_norm_backward(dz, c.z[i + 1], c.scale[i], c.batch_stat[i]);
        Matrix dpre(dz.rows(), dz.cols());
        for (std::size_t k = 0; k < dz.size(); ++k)
            dpre.data()[k] = c.pre[i].data()[k] > 0.0 ? dz.data()[k] : 0.0;
        gw[i] = matmul_tn(dpre, c.z[i]);
        gb[i] = detail::column_sums(dpre);
        dz = matmul(dpre, params.w[i]);
    }
    std::vector<Matrix> out{matmul_tn(dz, c.input), detail::column_sums(dz)};
    for (std::size_t i = 0; i < params.depth(); ++i) {
        out.push_back(std::move(gw[i]));
        out.push_back(std::move(gb[i]));
    }
    out.push_back(std::move(gu));
    out.push_back(std::move(gc));
    return out;
}

/// Eval-mode logits of one sample.
inline Vector mlp_logits(const MlpParams& params, std::span<const double> x)
{
    Vector z = matvec(params.w_in, x);
    for (std::size_t k = 0; k < z.size(); ++k) z[k] += params.b_in(0, k);
    for (std::size_t i = 0; i < params.depth(); ++i) {
        Vector y = matvec(params.w[i], z);
        const double s = params.norms[i].running >= kNormGuard ? params.norms[i].running : 1.0;
        for (std::size_t k = 0; k < y.size(); ++k) y[k] = std::max(y[k] + params.b[i](0, k), 0.0) / s;
        z = std::move(y);
    }
    Vector out = matvec(params.u, z);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += params.c(0, k);
    return out;
}

// ---------------------------------------------------------------------------------------------
// optimiser and schedule

struct AdamState {
    std::vector<Matrix> m, v;
    std::size_t t = 0;
};

/// Decoupled weight decay p ← p − lr·wd·p, then the bias-corrected Adam step.
inline void adamw_step(std::span<Matrix* const> params, std::span<const Matrix> grads, AdamState& state,
                       const TrainConfig& cfg, double lr)
{
    if (params.size() != grads.size()) throw DimensionError("adamw_step: parameter/gradient count mismatch");
    if (state.m.empty()) {
        for (const Matrix* p : params) {
            state.m.emplace_back(p->rows(), p->cols());
            state.v.emplace_back(p->rows(), p->cols());
        }
    }
    if (state.m.size() != params.size()) throw DimensionError("adamw_step: moment buffers do not match parameters");
    ++state.t;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    const double decay = 1.0 - lr * cfg.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i]->data();
        const auto g = grads[i].data();
        auto m = state.m[i].data();
        auto v = state.v[i].data();
        if (g.size() != p.size() || m.size() != p.size())
            throw DimensionError("adamw_step: shape mismatch at parameter " + std::to_string(i));
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            p[k] = decay * p[k] - lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.adam_eps);
        }
    }
}

inline double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr)
{
    if (total_steps == 0) return base_lr;
    if (step > total_steps) throw DimensionError("cosine_lr: step beyond schedule");
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

// ---------------------------------------------------------------------------------------------
// training loop

struct EpochMetrics {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double test_acc = 0.0;
    double lr = 0.0;
};

inline void write_metrics_csv(std::ostream& out, const std::vector<EpochMetrics>& rows)
{
    out << "epoch,train_loss,test_acc,lr\n";
    char buf[128];
    for (const EpochMetrics& r : rows) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss, r.test_acc, r.lr);
        out << buf;
    }
}

namespace detail {

/// The shared minibatch loop. step(x, labels, lr) runs one optimiser update and returns the
/// batch loss; accuracy() reports the per-epoch evaluation.
template <class StepFn, class AccFn>
std::vector<EpochMetrics> run_epochs(const Dataset& train_set, const TrainConfig& cfg, std::mt19937_64& rng,
                                     StepFn&& step, AccFn&& accuracy)
{
    if (train_set.size() == 0) throw DimensionError("train: empty dataset");
    cfg.validate();
    const std::size_t n = train_set.size();
    const std::size_t batch = std::min(cfg.batch_size, n);
    const std::size_t per_epoch = (n + batch - 1) / batch;
    const std::size_t total = per_epoch * cfg.epochs;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<EpochMetrics> log;
    std::size_t t = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        double lr = cfg.learning_rate;
        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t len = std::min(batch, n - start);
            Matrix x(len, train_set.input_dim());
            std::vector<int> labels(len);
            for (std::size_t k = 0; k < len; ++k) {
                const auto src = train_set.image(order[start + k]);
                std::copy(src.begin(), src.end(), x.row(k).begin());
                labels[k] = train_set.labels[order[start + k]];
            }
            add_noise(x, cfg.noise_sigma, rng, cfg.noise_mode);
            lr = cosine_lr(t, total, cfg.learning_rate);
            loss_sum += step(x, std::span<const int>(labels), lr) * static_cast<double>(len);
            ++t;
        }
        log.push_back(EpochMetrics{epoch, loss_sum / static_cast<double>(n), accuracy(), lr});
    }
    return log;
}

} // namespace detail

struct ChiTrainResult {
    ChiParams params;              // raw factored parameters
    std::vector<NormState> norms;  // running scalars after training
    ChiNet net;                    // norms folded in, factored cores
    std::vector<EpochMetrics> metrics;
};

/// Trains a factored χ-net with RMS normalisation after every core. test_acc is measured on
/// `test` (or on the clean training set when no test split is given) with the folded network.
inline ChiTrainResult train(const ChiNet& init, const Dataset& train_set, const TrainConfig& cfg,
                            const Dataset* test = nullptr)
{
    if (train_set.size() && train_set.input_dim() != init.input_dim())
        throw DimensionError("train: dataset input dim " + std::to_string(train_set.input_dim()) +
                             " != model input dim " + std::to_string(init.input_dim()));
    if (train_set.num_classes() > init.num_classes())
        throw DimensionError("train: dataset has more classes than the model outputs");
    ChiTrainResult r;
    r.params = ChiParams::from_net(init);
    if (cfg.bias_lane) pin_bias_lane(r.params);
    r.norms.assign(init.depth(), NormState{1.0, false, cfg.norm_momentum});
    std::mt19937_64 rng(cfg.seed);
    AdamState adam;
    const Dataset& eval_set = test ? *test : train_set;

    auto step = [&](const Matrix& x, std::span<const int> labels, double lr) {
        const ChiCache c = chi_forward_batch(r.params, x, &r.norms, NormMode::train);
        const BatchLoss l = batch_xent(c.logits, labels);
        ChiParams g = chi_backward(r.params, c, l.dlogits);
        std::vector<Matrix> grads;
        for (Matrix* m : g.tensors()) grads.push_back(std::move(*m));
        adamw_step(r.params.tensors(), grads, adam, cfg, lr);
        if (cfg.bias_lane) pin_bias_lane(r.params);
        if (!all_finite(r.params.u.data())) throw NumericalError("train: parameters diverged (non-finite values)");
        return l.loss;
    };
    auto accuracy = [&]() { return evaluate(fold_norm(r.params, r.norms), eval_set).accuracy; };
    r.metrics = detail::run_epochs(train_set, cfg, rng, step, accuracy);
    r.net = fold_norm(r.params, r.norms);
    return r;
}

struct MlpTrainResult {
    MlpParams params;
    std::vector<EpochMetrics> metrics;
};

inline EvalResult evaluate(const MlpParams& params, const Dataset& ds)
{
    if (ds.size() > 0 && ds.input_dim() != params.w_in.cols()) throw DimensionError("evaluate: input dim mismatch");
    return evaluate_with([&params](std::span<const double> x) { return mlp_logits(params, x); }, ds);
}

/// ReLU baseline trained with the same loop, noise, optimiser and schedule.
inline MlpTrainResult train_relu_baseline(std::span<const std::size_t> hidden, const Dataset& train_set,
                                          const TrainConfig& cfg, const Dataset* test = nullptr)
{
    std::mt19937_64 rng(cfg.seed);
    MlpTrainResult r;
    r.params = random_mlp(train_set.input_dim(), hidden, std::max<std::size_t>(train_set.num_classes(), 1), rng,
                          cfg.norm_momentum);
    AdamState adam;
    const Dataset& eval_set = test ? *test : train_set;
    auto step = [&](const Matrix& x, std::span<const int> labels, double lr) {
        const MlpCache c = mlp_forward_batch(r.params, x, NormMode::train);
        const BatchLoss l = batch_xent(c.logits, labels);
        const std::vector<Matrix> grads = mlp_backward(r.params, c, l.dlogits);
        adamw_step(r.params.tensors(), grads, adam, cfg, lr);
        return l.loss;
    };
    auto accuracy = [&]() { return evaluate(r.params, eval_set).accuracy; };
    r.metrics = detail::run_epochs(train_set, cfg, rng, step, accuracy);
    return r;
}

} // namespace chinet
