#pragma once

// Orthogonalisation, diagonalisation and truncation of χ-nets.
//
// Bonds are numbered 1..L+1: bond 1 is the embedding output, bond i+1 the output of core i.
// Every per-bond vector in this header is indexed by bond - 1.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "chinet/data.hpp"
#include "chinet/errors.hpp"
#include "chinet/eval.hpp"
#include "chinet/linalg.hpp"
#include "chinet/model.hpp"
#include "chinet/parallel.hpp"

namespace chinet {

namespace detail {

/// Orthonormal coordinates of a symmetric core's slices: the (j,j) entry and √2·f[l,j,k] for j < k.
inline Matrix pack_symmetric(const Core3& f)
{
    const std::size_t h = f.in_dim();
    const std::size_t s = h * (h + 1) / 2;
    Matrix m(f.out_dim(), s);
    const double r2 = std::sqrt(2.0);
    for (std::size_t l = 0; l < f.out_dim(); ++l) {
        std::size_t c = 0;
        for (std::size_t j = 0; j < h; ++j) {
            m(l, c++) = f(l, j, j);
            for (std::size_t k = j + 1; k < h; ++k) m(l, c++) = r2 * 0.5 * (f(l, j, k) + f(l, k, j));
        }
    }
    return m;
}

inline Core3 unpack_symmetric(const Matrix& m, std::size_t h)
{
    if (m.cols() != h * (h + 1) / 2) throw DimensionError("unpack_symmetric: column count mismatch");
    Core3 f(m.rows(), h);
    const double inv = 1.0 / std::sqrt(2.0);
    for (std::size_t l = 0; l < m.rows(); ++l) {
        std::size_t c = 0;
        for (std::size_t j = 0; j < h; ++j) {
            f(l, j, j) = m(l, c++);
            for (std::size_t k = j + 1; k < h; ++k) {
                const double v = m(l, c++) * inv;
                f(l, j, k) = v;
                f(l, k, j) = v;
            }
        }
    }
    f.set_symmetric_flag(true);
    return f;
}

inline void require_symmetric(const Core3& f, const std::string& where)
{
    const double scale = std::max(1.0, max_abs(f.data()));
    if (f.max_asymmetry() > 1e-10 * scale)
        throw NumericalError(where + ": core asymmetry " + std::to_string(f.max_asymmetry()) + " exceeds 1e-10");
}

/// ‖M·Mᵀ − I‖_max
inline double coisometry_residual(const Matrix& m)
{
    const Matrix g = matmul_nt(m, m);
    double r = 0.0;
    for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) r = std::max(r, std::abs(g(i, j) - (i == j ? 1.0 : 0.0)));
    return r;
}

} // namespace detail

/// A χ-net whose embedding and cores are isometries (row-orthonormal matricisations);
/// the whole non-orthogonal part lives in the unembedding.
struct OrthNet {
    ChiNet net;

    /// ‖M_i·M_iᵀ − I‖_max for the embedding (i = 0) and every core.
    std::vector<double> isometry_residuals() const
    {
        std::vector<double> r;
        r.push_back(detail::coisometry_residual(net.embedding()));
        for (const Core& c : net.cores()) r.push_back(detail::coisometry_residual(std::get<Core3>(c).matricise()));
        return r;
    }

    /// ‖χ‖_F equals ‖u‖_F once every core below the unembedding is an isometry.
    double frobenius() const { return chinet::frobenius(net.unembedding()); }
};

/// Bottom-up reduced-RQ sweep. Each R_i is absorbed into the next core as f_{i+1} ∘ (R_i ⊗ R_i)
/// (or u ∘ R_L). Symmetric cores are factored inside the symmetric subspace so every Q_i stays
/// symmetric; bond dimensions may shrink to the rank bound min(rows, cols).
inline OrthNet orthogonalise(const ChiNet& net)
{
    if (!net.all_dense_symmetric())
        throw DimensionError("orthogonalise: network must be symmetrised (dense symmetric cores)");

    RQ rq = rq_thin(net.embedding());
    Matrix embedding = std::move(rq.q);
    Matrix carry = std::move(rq.r);

    std::vector<Core> cores;
    cores.reserve(net.depth());
    for (std::size_t i = 0; i < net.depth(); ++i) {
        const Core3 absorbed = std::get<Core3>(net.core(i)).contract_inputs(carry);
        detail::require_symmetric(absorbed, "orthogonalise");
        const std::size_t h = absorbed.in_dim();
        RQ crq = rq_thin(detail::pack_symmetric(absorbed));
        cores.emplace_back(detail::unpack_symmetric(crq.q, h));
        carry = std::move(crq.r);
    }
    Matrix unembedding = matmul(net.unembedding(), carry);
    return OrthNet{ChiNet(std::move(embedding), std::move(cores), std::move(unembedding))};
}

/// G_i for bonds 1..L+1: G_{L+1} = uᵀu, then G_i = gram_step(f_i, G_{i+1}) top-down.
inline std::vector<Matrix> gram_sequence(const OrthNet& onet)
{
    const ChiNet& net = onet.net;
    std::vector<Matrix> grams(net.depth() + 1);
    grams[net.depth()] = matmul_tn(net.unembedding(), net.unembedding());
    for (std::size_t i = net.depth(); i-- > 0;)
        grams[i] = gram_step(std::get<Core3>(net.core(i)), grams[i + 1]);
    return grams;
}

/// Per-bond eigenbases V_i and eigenvalues Λ_i (descending) of the Gram matrices.
struct BondSpectrum {
    std::vector<Spectrum> bonds;

    std::size_t size() const noexcept { return bonds.size(); }
    const Vector& eigenvalues(std::size_t bond) const { return bonds.at(bond - 1).values; }
    const Matrix& eigenvectors(std::size_t bond) const { return bonds.at(bond - 1).vectors; }
};

inline BondSpectrum diagonalise(const OrthNet& onet)
{
    const std::vector<Matrix> grams = gram_sequence(onet);
    BondSpectrum out;
    out.bonds.resize(grams.size());
    parallel_for(grams.size(), [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) out.bonds[i] = sym_evd(grams[i]);
    });
    return out;
}

struct TruncationPlan {
    std::vector<std::size_t> ranks;
    std::optional<double> epsilon;
};

/// Which per-bond energy the error budget is spent on.
enum class RankCriterion {
    /// Σ_{j>r} λ_j² ≤ ε²/(2^{L+1}−1)·Σ λ_j², i.e. ‖G‖²_F − ‖G'‖²_F.
    gram_frobenius,
    /// Σ_{j>r} λ_j ≤ ε²/(2^{L+1}−1)·Σ λ_j, the discarded squared singular values of the network.
    singular_energy,
};

inline constexpr double kZeroEigenvalueRelTol = 1e-12;

/// Smallest rank per bond meeting the error budget, never below 1.
inline TruncationPlan select_ranks(const BondSpectrum& spectrum, double epsilon, std::size_t depth,
                                   RankCriterion criterion = RankCriterion::singular_energy)
{
    if (!(epsilon > 0.0)) throw ConfigError("select_ranks: epsilon must be positive");
    const double projections = std::ldexp(1.0, static_cast<int>(depth) + 1) - 1.0;
    const double fraction = epsilon * epsilon / projections;

    TruncationPlan plan;
    plan.epsilon = epsilon;
    for (const Spectrum& s : spectrum.bonds) {
        const std::size_t n = s.values.size();
        const double lmax = n ? std::max(s.values.front(), 0.0) : 0.0;
        std::size_t nonzero = 0;
        Vector energy(n, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            const double l = s.values[j] > kZeroEigenvalueRelTol * lmax ? s.values[j] : 0.0;
            if (l > 0.0) ++nonzero;
            energy[j] = criterion == RankCriterion::gram_frobenius ? l * l : l;
        }
        const double total = std::accumulate(energy.begin(), energy.end(), 0.0);
        const double budget = fraction * total;
        // tail[r] = Σ_{j≥r} energy[j]
        std::size_t r = n;
        double tail = 0.0;
        while (r > 1 && tail + energy[r - 1] <= budget) {
            tail += energy[r - 1];
            --r;
        }
        r = std::min(r, std::max<std::size_t>(nonzero, 1));
        plan.ranks.push_back(std::max<std::size_t>(r, 1));
    }
    return plan;
}

/// Contracts the leading r_i eigenvectors of every bond into the adjacent cores:
/// e' = V_1ᵀ e, f'_i = V_{i+1}ᵀ ∘ f_i ∘ (V_i ⊗ V_i), u' = u·V_{L+1}.
inline ChiNet truncate(const OrthNet& onet, const BondSpectrum& spectrum, const TruncationPlan& plan)
{
    const ChiNet& net = onet.net;
    const std::size_t bonds = net.depth() + 1;
    if (spectrum.size() != bonds || plan.ranks.size() != bonds)
        throw DimensionError("truncate: expected " + std::to_string(bonds) + " bonds in spectrum and plan");
    std::vector<Matrix> v(bonds);
    for (std::size_t b = 0; b < bonds; ++b) {
        const std::size_t r = plan.ranks[b];
        const std::size_t dim = net.bond_dim(b + 1);
        if (r < 1 || r > dim)
            throw DimensionError("truncate: rank " + std::to_string(r) + " out of range [1, " + std::to_string(dim) +
                                 "] at bond " + std::to_string(b + 1));
        v[b] = leading_columns(spectrum.bonds[b].vectors, r);
    }

    Matrix embedding = matmul_tn(v[0], net.embedding());
    std::vector<Core> cores;
    cores.reserve(net.depth());
    for (std::size_t i = 0; i < net.depth(); ++i) {
        const Core3 g = std::get<Core3>(net.core(i)).contract_inputs(v[i]).contract_output(v[i + 1].transpose());
        detail::require_symmetric(g, "truncate");
        cores.emplace_back(g.symmetrised());
    }
    Matrix unembedding = matmul(net.unembedding(), v[bonds - 1]);
    return ChiNet(std::move(embedding), std::move(cores), std::move(unembedding));
}

inline TruncationPlan full_rank_plan(const ChiNet& net)
{
    return TruncationPlan{net.bond_dims(), std::nullopt};
}

/// Output of the whole pipeline on one network.
struct OdtResult {
    OrthNet orth;
    BondSpectrum spectrum;
    TruncationPlan plan;
    ChiNet truncated;

    /// Eigenvalues kept at each bond of the truncated network.
    std::vector<Vector> kept_eigenvalues() const
    {
        std::vector<Vector> out;
        for (std::size_t b = 0; b < spectrum.size(); ++b) {
            const Vector& all = spectrum.bonds[b].values;
            out.emplace_back(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(plan.ranks[b]));
        }
        return out;
    }
};

/// symmetrise → orthogonalise → diagonalise, then truncate with an explicit plan (full rank if empty).
inline OdtResult run_odt(const ChiNet& net, std::optional<TruncationPlan> plan = std::nullopt)
{
    OdtResult r;
    r.orth = orthogonalise(net.all_dense_symmetric() ? net : symmetrise(net));
    r.spectrum = diagonalise(r.orth);
    r.plan = plan ? *plan : full_rank_plan(r.orth.net);
    r.truncated = truncate(r.orth, r.spectrum, r.plan);
    return r;
}

inline OdtResult run_odt(const ChiNet& net, double epsilon, RankCriterion criterion = RankCriterion::singular_energy)
{
    OdtResult r;
    r.orth = orthogonalise(net.all_dense_symmetric() ? net : symmetrise(net));
    r.spectrum = diagonalise(r.orth);
    r.plan = select_ranks(r.spectrum, epsilon, net.depth(), criterion);
    r.truncated = truncate(r.orth, r.spectrum, r.plan);
    return r;
}

/// Participation ratio (Σ s)² / Σ s² of a non-negative spectrum.
inline double effective_dim(std::span<const double> values)
{
    double s = 0.0;
    double s2 = 0.0;
    for (double v : values) {
        if (v < 0.0) throw NumericalError("effective_dim: negative value");
        s += v;
        s2 += v * v;
    }
    if (s2 <= 0.0) throw NumericalError("effective_dim: spectrum has no positive value");
    return s * s / s2;
}

/// Singular values √λ of a Gram spectrum (negative round-off clamped to zero).
inline Vector singular_from_eigen(std::span<const double> lambdas)
{
    Vector s(lambdas.size());
    std::transform(lambdas.begin(), lambdas.end(), s.begin(), [](double l) { return std::sqrt(std::max(l, 0.0)); });
    return s;
}

inline Vector normalised(Vector v)
{
    const double m = v.empty() ? 0.0 : *std::max_element(v.begin(), v.end());
    if (m > 0.0)
        for (double& x : v) x /= m;
    return v;
}

/// Normalised singular values of each matricised core taken in isolation: the embedding
/// (bond 1) and then core i (h_{i+1} × h_i², bond i+1).
inline std::vector<Vector> local_svd(const ChiNet& net)
{
    std::vector<Vector> out;
    out.push_back(normalised(singular_values(net.embedding())));
    for (const Core& c : net.cores()) out.push_back(normalised(singular_values(to_dense(c).matricise())));
    return out;
}

struct SweepRow {
    std::size_t removed = 0;
    double removed_frac = 0.0;
    double accuracy = 0.0;
    double loss = 0.0;
    double frobenius = 0.0;
    std::vector<std::size_t> ranks;
};

/// Global removal order: every dimension except the leading one of each bond, ranked by
/// λ_j / λ_max of its own bond, smallest first. Returns (bond index, position) pairs.
inline std::vector<std::pair<std::size_t, std::size_t>> removal_order(const BondSpectrum& spectrum)
{
    struct Item {
        double score;
        std::size_t bond;
        std::size_t pos;
    };
    std::vector<Item> items;
    for (std::size_t b = 0; b < spectrum.size(); ++b) {
        const Vector& l = spectrum.bonds[b].values;
        const double lmax = l.empty() ? 0.0 : l.front();
        for (std::size_t j = 1; j < l.size(); ++j)
            items.push_back({lmax > 0.0 ? l[j] / lmax : 0.0, b, j});
    }
    std::stable_sort(items.begin(), items.end(), [](const Item& x, const Item& y) {
        if (x.score != y.score) return x.score < y.score;
        if (x.bond != y.bond) return x.bond < y.bond;
        return x.pos > y.pos;
    });
    std::vector<std::pair<std::size_t, std::size_t>> out;
    out.reserve(items.size());
    for (const Item& it : items) out.emplace_back(it.bond, it.pos);
    return out;
}

/// Ranks after removing the first `removed` entries of removal_order. Within a bond removal
/// always proceeds from the tail, so the result is a prefix plan.
inline TruncationPlan plan_after_removal(const BondSpectrum& spectrum, std::size_t removed)
{
    const auto order = removal_order(spectrum);
    if (removed > order.size()) throw DimensionError("plan_after_removal: too many dimensions removed");
    TruncationPlan plan;
    for (const Spectrum& s : spectrum.bonds) plan.ranks.push_back(s.values.size());
    for (std::size_t k = 0; k < removed; ++k) --plan.ranks[order[k].first];
    return plan;
}

/// Cumulative truncation curve over `points` evenly spaced removal counts (endpoints included).
/// The Frobenius column is ‖χ'‖_F, obtained exactly by re-orthogonalising each truncated net.
inline std::vector<SweepRow> truncation_sweep(const OrthNet& onet, const BondSpectrum& spectrum, const Dataset& test,
                                              std::size_t points = 50)
{
    std::size_t total = 0;
    for (const Spectrum& s : spectrum.bonds) total += s.values.size();
    const std::size_t removable = total - spectrum.size();
    points = std::max<std::size_t>(points, 2);

    std::vector<std::size_t> counts;
    for (std::size_t p = 0; p < points; ++p) {
        const std::size_t k = static_cast<std::size_t>(
            std::llround(static_cast<double>(p) * static_cast<double>(removable) / static_cast<double>(points - 1)));
        if (counts.empty() || counts.back() != k) counts.push_back(k);
    }

    std::vector<SweepRow> rows;
    for (std::size_t k : counts) {
        const TruncationPlan plan = plan_after_removal(spectrum, k);
        const ChiNet net = truncate(onet, spectrum, plan);
        const EvalResult ev = evaluate(net, test);
        SweepRow row;
        row.removed = k;
        row.removed_frac = total ? static_cast<double>(k) / static_cast<double>(total) : 0.0;
        row.accuracy = ev.accuracy;
        row.loss = ev.loss;
        row.frobenius = orthogonalise(net).frobenius();
        row.ranks = plan.ranks;
        rows.push_back(std::move(row));
    }
    return rows;
}

} // namespace chinet
