#include "qdbench/refdyn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <unordered_map>

#include <Eigen/Eigenvalues>

#include "qdbench/errors.hpp"

namespace qdbench::refdyn {

namespace {

// Multiplication by +-i without the generic complex product.
inline cplx times_i(cplx z) { return {-z.imag(), z.real()}; }
inline cplx times_minus_i(cplx z) { return {z.imag(), -z.real()}; }

// A truncation too large to allocate; ends refinement instead of counting as unstable.
class HierarchyTooLarge : public NumericalError {
public:
    using NumericalError::NumericalError;
};

void require(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
}

// phi_k(z) = sum_j z^j / (j + k)!, k = 1..3
std::array<double, 3> phi_functions(double z) {
    if (std::abs(z) < 1.0) {
        std::array<double, 3> phi{};
        for (int k = 1; k <= 3; ++k) {
            double term = 1.0;
            for (int f = 2; f <= k; ++f) term /= f;
            double sum = 0.0;
            for (int j = 0; j < 40; ++j) {
                sum += term;
                term *= z / (j + k + 1);
            }
            phi[k - 1] = sum;
        }
        return phi;
    }
    const double ez = std::exp(z);
    const double p1 = (ez - 1.0) / z;
    const double p2 = (ez - 1.0 - z) / (z * z);
    const double p3 = (ez - 1.0 - z - 0.5 * z * z) / (z * z * z);
    return {p1, p2, p3};
}

// Cox-Matthews ETDRK4 weights for one diagonal decay rate.
struct EtdWeights {
    double e_full{1.0};
    double e_half{1.0};
    double half_step{0.0};  // (e^{Lh/2} - 1) / L
    double f1{0.0}, f2{0.0}, f3{0.0};
};

EtdWeights etd_weights(double decay, double h) {
    const double z = -decay * h;
    EtdWeights w;
    w.e_full = std::exp(z);
    w.e_half = std::exp(0.5 * z);
    w.half_step = 0.5 * h * phi_functions(0.5 * z)[0];
    const auto phi = phi_functions(z);
    w.f1 = h * (phi[0] - 3.0 * phi[1] + 4.0 * phi[2]);
    w.f2 = h * (phi[1] - 2.0 * phi[2]);
    w.f3 = h * (-phi[1] + 4.0 * phi[2]);
    return w;
}

// Hierarchy-side view of one bath mode. The unscaled equations read
//   d rho_n/dt = ... - i sum_k u_k [Q, rho_{n+e_k}] - i sum_k n_k (d_k Q rho_{n-e_k} - d_k^* rho_{n-e_k} Q)
//                - sum_k n_k gamma_k rho_n - sum_{k != j} n_k G_kj rho_{n-e_k+e_j},
// i.e. C(t) = u^T exp(-G t) d with a real decay matrix G. Plain exponential modes have
// u = 1, d = c and diagonal G. ADOs are stored scaled by prod_k scale_k^{n_k} sqrt(n_k!).
struct HeomMode {
    double up{1.0};
    cplx down;
    double rate{0.0};
    double scale{1.0};
};

struct LateralLink {
    std::size_t from;  // k
    std::size_t to;    // j
    double rate;       // G_kj
};

struct ModeSet {
    std::vector<HeomMode> modes;
    std::vector<LateralLink> links;
};

// The Drude term and a Bose pole of nearby rate can carry large coefficients of opposite
// sign. The pair c_a e^{-g t} + c_b e^{-v t} is then rewritten exactly on the basis
// {e^{-g t}, (e^{-v t} - e^{-g t}) / (v - g)}, whose coefficients c_a + c_b and
// c_b (v - g) stay bounded; the second function has no up-coupling and is fed from the
// first through G_{0j} = 1.
ModeSet heom_modes(const std::vector<BathMode>& bath) {
    ModeSet set;
    for (const auto& m : bath) set.modes.push_back({1.0, m.coefficient, m.decay_rate, std::sqrt(std::abs(m.coefficient))});
    if (bath.size() < 2) return set;
    const double g = bath[0].decay_rate;
    std::size_t j = 1;
    for (std::size_t k = 2; k < bath.size(); ++k)
        if (std::abs(bath[k].decay_rate - g) < std::abs(bath[j].decay_rate - g)) j = k;
    const cplx ca = bath[0].coefficient, cb = bath[j].coefficient;
    if (std::abs(ca + cb) >= 0.5 * std::max(std::abs(ca), std::abs(cb))) return set;

    auto& drude = set.modes[0];
    auto& pole = set.modes[j];
    drude.down = ca + cb;
    drude.scale = std::sqrt(std::max(std::abs(drude.down), 1e-12));
    pole.up = 0.0;
    pole.down = cb * (bath[j].decay_rate - g);
    pole.scale = std::sqrt(std::abs(pole.down) * drude.scale);
    set.links.push_back({0, j, 1.0});
    return set;
}

// Multi-indices n with |n| <= depth over the bath modes, plus neighbour tables.
struct Hierarchy {
    std::size_t n_modes{0};
    std::size_t n_links{0};
    std::vector<std::vector<int>> index;
    std::vector<std::ptrdiff_t> up;       // [ado * n_modes + k], -1 when truncated
    std::vector<std::ptrdiff_t> down;     // [ado * n_modes + k], -1 when n_k == 0
    std::vector<std::ptrdiff_t> lateral;  // [ado * n_links + l], -1 when n_from == 0
    std::vector<double> decay;            // sum_k n_k gamma_k
};

Hierarchy build_hierarchy(const ModeSet& set, int depth) {
    Hierarchy h;
    h.n_modes = set.modes.size();
    h.n_links = set.links.size();
    const std::uint64_t base = static_cast<std::uint64_t>(depth) + 1;
    auto key = [&](const std::vector<int>& n) {
        std::uint64_t k = 0;
        for (int v : n) k = k * base + static_cast<std::uint64_t>(v);
        return k;
    };

    // Breadth-first by tier keeps rho_0 at index 0.
    std::unordered_map<std::uint64_t, std::size_t> lookup;
    std::vector<int> zero(h.n_modes, 0);
    h.index.push_back(zero);
    lookup.emplace(key(zero), 0);
    for (std::size_t pos = 0; pos < h.index.size(); ++pos) {
        const auto cur = h.index[pos];
        int tier = 0;
        for (int v : cur) tier += v;
        if (tier == depth) continue;
        for (std::size_t k = 0; k < h.n_modes; ++k) {
            auto next = cur;
            ++next[k];
            if (lookup.emplace(key(next), h.index.size()).second) h.index.push_back(next);
        }
    }

    const std::size_t n_ado = h.index.size();
    h.up.assign(n_ado * h.n_modes, -1);
    h.down.assign(n_ado * h.n_modes, -1);
    h.lateral.assign(n_ado * h.n_links, -1);
    h.decay.assign(n_ado, 0.0);
    for (std::size_t a = 0; a < n_ado; ++a) {
        auto n = h.index[a];
        for (std::size_t k = 0; k < h.n_modes; ++k) {
            h.decay[a] += n[k] * set.modes[k].rate;
            ++n[k];
            if (auto it = lookup.find(key(n)); it != lookup.end())
                h.up[a * h.n_modes + k] = static_cast<std::ptrdiff_t>(it->second);
            n[k] -= 2;
            if (n[k] >= 0) h.down[a * h.n_modes + k] = static_cast<std::ptrdiff_t>(lookup.at(key(n)));
            ++n[k];
        }
        for (std::size_t l = 0; l < h.n_links; ++l) {
            const auto& link = set.links[l];
            if (n[link.from] == 0) continue;
            --n[link.from];
            ++n[link.to];
            h.lateral[a * h.n_links + l] = static_cast<std::ptrdiff_t>(lookup.at(key(n)));
            ++n[link.from];
            --n[link.to];
        }
    }
    return h;
}

// Right-hand side of the scaled hierarchy without the diagonal decay, which the
// exponential integrator treats exactly. Coupling operator is sigma_z. Neighbour
// couplings are flattened into per-ADO lists with their scale factors folded in.
class HierarchyRhs {
public:
    HierarchyRhs(const SpinBosonParams& p, const ModeSet& set, const Hierarchy& h, double tail_weight)
        : tail_(tail_weight) {
        h00_ = 0.5 * p.epsilon;
        h01_ = 0.5 * p.delta;
        const std::size_t m = h.n_modes;
        const std::size_t n_ado = h.index.size();
        up_begin_.assign(n_ado + 1, 0);
        down_begin_.assign(n_ado + 1, 0);
        lateral_begin_.assign(n_ado + 1, 0);
        for (std::size_t a = 0; a < n_ado; ++a) {
            const auto& n = h.index[a];
            for (std::size_t k = 0; k < m; ++k) {
                const auto& mode = set.modes[k];
                const double nk = n[k];
                if (const auto j = h.up[a * m + k]; j >= 0 && mode.up != 0.0)
                    up_.push_back({static_cast<std::uint32_t>(j), 2.0 * mode.up * mode.scale * std::sqrt(nk + 1.0)});
                // -i sqrt(n_k)/scale_k (d Q rho - d^* rho Q), Q = sigma_z
                if (const auto j = h.down[a * m + k]; j >= 0) {
                    const double s = std::sqrt(nk) / mode.scale;
                    down_.push_back({static_cast<std::uint32_t>(j), 2.0 * s * mode.down.imag(), 2.0 * s * mode.down.real()});
                }
            }
            for (std::size_t l = 0; l < h.n_links; ++l) {
                const auto& link = set.links[l];
                if (const auto j = h.lateral[a * h.n_links + l]; j >= 0)
                    lateral_.push_back({static_cast<std::uint32_t>(j),
                                        -link.rate * std::sqrt(n[link.from] * (n[link.to] + 1.0)) *
                                            set.modes[link.to].scale / set.modes[link.from].scale});
            }
            up_begin_[a + 1] = up_.size();
            down_begin_[a + 1] = down_.size();
            lateral_begin_[a + 1] = lateral_.size();
        }
    }

    void operator()(const std::vector<DensityMatrix>& u, std::vector<DensityMatrix>& out) const {
        const double h00 = h00_, h01 = h01_, tail4 = 4.0 * tail_;
        for (std::size_t a = 0; a < u.size(); ++a) {
            const auto& r = u[a];
            // -i [H, rho], H = [[h00, h01], [h01, -h00]]
            const cplx c00 = h01 * (r[2] - r[1]);
            const cplx c01 = 2.0 * h00 * r[1] + h01 * (r[3] - r[0]);
            const cplx c10 = -2.0 * h00 * r[2] + h01 * (r[0] - r[3]);
            // Off-diagonal drives are summed before the common factor -i is applied.
            cplx m1 = c01 + tail4 * times_minus_i(r[1]);
            cplx m2 = c10 + tail4 * times_minus_i(r[2]);
            // Separate accumulators keep the add chains short.
            cplx u1{}, u2{};
            for (std::size_t e = up_begin_[a]; e < up_begin_[a + 1]; ++e) {
                const auto& q = u[up_[e].ado];
                u1 += up_[e].s * q[1];
                u2 += up_[e].s * q[2];
            }
            cplx v1{}, v2{}, w0{}, w3{};
            for (std::size_t e = down_begin_[a]; e < down_begin_[a + 1]; ++e) {
                const auto& q = u[down_[e].ado];
                const auto& c = down_[e];
                w0 += c.im * q[0];
                w3 += c.im * q[3];
                v1 += c.re * q[1];
                v2 += c.re * q[2];
            }
            m1 += u1 + v1;
            m2 -= u2 + v2;
            DensityMatrix d{times_minus_i(c00) + w0, times_minus_i(m1), times_minus_i(m2), times_i(c00) - w3};
            for (std::size_t e = lateral_begin_[a]; e < lateral_begin_[a + 1]; ++e) {
                const auto& q = u[lateral_[e].ado];
                for (int k = 0; k < 4; ++k) d[k] += lateral_[e].s * q[k];
            }
            out[a] = d;
        }
    }

private:
    struct Link {
        std::uint32_t ado;
        double s;
    };
    struct DownLink {
        std::uint32_t ado;
        double im, re;
    };
    double tail_;
    double h00_{0.0}, h01_{0.0};
    std::vector<Link> up_, lateral_;
    std::vector<DownLink> down_;
    std::vector<std::size_t> up_begin_, down_begin_, lateral_begin_;
};

// Poles (eta_j, xi_j) of the [N-1/N] Pade approximant of the Bose function,
// 1/(1 - e^{-x}) ~ 1/x + 1/2 + sum_j 2 eta_j x / (x^2 + xi_j^2).
std::vector<std::pair<double, double>> pade_bose_poles(int n) {
    std::vector<std::pair<double, double>> poles;
    if (n <= 0) return poles;
    auto neg_eigs = [](int size, int offset) {
        Eigen::MatrixXd m = Eigen::MatrixXd::Zero(size, size);
        for (int k = 0; k + 1 < size; ++k) {
            const double v = 1.0 / std::sqrt((2.0 * k + offset) * (2.0 * k + offset - 2.0));
            m(k, k + 1) = m(k + 1, k) = v;
        }
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
        return Eigen::VectorXd(es.eigenvalues());
    };
    const Eigen::VectorXd ev = neg_eigs(2 * n, 5);
    const Eigen::VectorXd evp = neg_eigs(2 * n - 1, 7);
    std::vector<double> xi(n), chi(std::max(n - 1, 0));
    for (int j = 0; j < n; ++j) xi[j] = -2.0 / ev(j);
    for (int j = 0; j + 1 < n; ++j) chi[j] = -2.0 / evp(j);
    const double prefactor = 0.5 * n * (2.0 * (n + 1) + 1.0);
    for (int j = 0; j < n; ++j) {
        double eta = prefactor;
        for (int k = 0; k + 1 < n; ++k) {
            const double denom = k == j ? 1.0 : xi[k] * xi[k] - xi[j] * xi[j];
            eta *= (chi[k] * chi[k] - xi[j] * xi[j]) / denom;
        }
        const double last = (n - 1 == j) ? 1.0 : xi[n - 1] * xi[n - 1] - xi[j] * xi[j];
        eta /= last;
        poles.emplace_back(eta, xi[j]);
    }
    return poles;
}

// Weight of the part of sum_{k>=1} c_k/nu_k not represented by `modes` (entries after the
// Drude pole), using sum_{k>=1} c_k / nu_k = 2 lambda / (beta g) - lambda cot(beta g / 2).
double tail_weight(const SpinBosonParams& p, const std::vector<BathMode>& modes) {
    const double g = p.omega_c;
    double total = 2.0 * p.lambda / (p.beta * g) - p.lambda / std::tan(0.5 * p.beta * g);
    for (std::size_t k = 1; k < modes.size(); ++k) total -= modes[k].coefficient.real() / modes[k].decay_rate;
    return total;
}

std::vector<double> save_times(const HierarchyConfig& cfg) {
    std::vector<double> t(cfg.n_saved());
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i) * cfg.dt_save;
    return t;
}

void track_stats(const DensityMatrix& r, PropagationStats& s) {
    const cplx tr = r[0] + r[3];
    s.max_trace_error = std::max(s.max_trace_error, std::abs(tr - 1.0));
    const double herm = std::max({std::abs(r[1] - std::conj(r[2])), std::abs(r[0].imag()),
                                  std::abs(r[3].imag())});
    s.max_hermiticity_error = std::max(s.max_hermiticity_error, herm);
    const double a = r[0].real(), d = r[3].real();
    const double off = 0.5 * std::abs(r[1] + std::conj(r[2]));
    const double lmin = 0.5 * (a + d) - std::sqrt(0.25 * (a - d) * (a - d) + off * off);
    s.min_eigenvalue = std::min(s.min_eigenvalue, lmin);
}

std::string format_number(double v) {
    std::ostringstream os;
    os << std::setprecision(6) << v;
    return os.str();
}

}  // namespace

void SpinBosonParams::validate() const {
    require(std::isfinite(epsilon), "epsilon must be finite");
    require(delta >= 0.0 && std::isfinite(delta), "delta must be non-negative");
    require(lambda >= 0.0 && std::isfinite(lambda), "lambda must be non-negative");
    require(omega_c > 0.0 && std::isfinite(omega_c), "omega_c must be positive");
    require(beta > 0.0 && std::isfinite(beta), "beta must be positive");
}

void HierarchyConfig::validate(const SpinBosonParams& p) const {
    require(n_matsubara >= 0, "n_matsubara must be non-negative");
    require(depth >= 0, "depth must be non-negative");
    require(p.lambda == 0.0 || depth >= 1, "depth must be >= 1 when lambda > 0");
    require(dt_integrate > 0.0 && dt_save > 0.0 && t_max > 0.0, "time steps must be positive");
    require(dt_integrate <= dt_save * (1.0 + 1e-12), "dt_integrate must not exceed dt_save");
    const double ratio = t_max / dt_save;
    require(std::abs(ratio - std::round(ratio)) < 1e-9 * std::max(1.0, ratio),
            "dt_save must divide t_max");
    require(convergence_tol > 0.0, "convergence_tol must be positive");
    require(max_auxiliary >= 1, "max_auxiliary must be positive");
}

std::size_t HierarchyConfig::n_saved() const {
    return static_cast<std::size_t>(std::llround(t_max / dt_save)) + 1;
}

double debye_spectral_density(double omega, const SpinBosonParams& p) {
    return 2.0 * p.lambda * omega * p.omega_c / (omega * omega + p.omega_c * p.omega_c);
}

std::vector<BathMode> bath_correlation_modes(const SpinBosonParams& p, int n_matsubara) {
    require(p.beta > 0.0, "beta must be positive");
    require(p.omega_c > 0.0, "omega_c must be positive");
    require(n_matsubara >= 0, "n_matsubara must be non-negative");
    const double g = p.omega_c;
    const double x = 0.5 * p.beta * g;
    if (std::abs(std::sin(x)) < 1e-10)
        throw NumericalError("Drude pole coincides with a Matsubara frequency (beta*omega_c = 2*pi*k)");
    std::vector<BathMode> modes;
    modes.push_back({p.lambda * g * cplx(1.0 / std::tan(x), -1.0), g});
    for (int k = 1; k <= n_matsubara; ++k) {
        const double nu = 2.0 * std::numbers::pi * k / p.beta;
        const double c = 4.0 * p.lambda * g / p.beta * nu / (nu * nu - g * g);
        modes.push_back({cplx(c, 0.0), nu});
    }
    return modes;
}

std::vector<BathMode> bath_correlation_modes_pade(const SpinBosonParams& p, int n_poles) {
    require(p.beta > 0.0, "beta must be positive");
    require(p.omega_c > 0.0, "omega_c must be positive");
    require(n_poles >= 0, "number of Pade poles must be non-negative");
    const double g = p.omega_c;
    const double x = 0.5 * p.beta * g;
    if (std::abs(std::sin(x)) < 1e-10)
        throw NumericalError("Drude pole coincides with a Matsubara frequency (beta*omega_c = 2*pi*k)");
    std::vector<BathMode> modes;
    modes.push_back({p.lambda * g * cplx(1.0 / std::tan(x), -1.0), g});
    for (const auto& [eta, xi] : pade_bose_poles(n_poles)) {
        const double nu = xi / p.beta;
        if (std::abs(nu - g) < 1e-10 * g) throw NumericalError("Drude pole coincides with a Pade pole");
        const double c = eta * 4.0 * p.lambda * g / p.beta * nu / (nu * nu - g * g);
        modes.push_back({cplx(c, 0.0), nu});
    }
    return modes;
}

double matsubara_tail_weight(const SpinBosonParams& p, int n_matsubara) {
    return tail_weight(p, bath_correlation_modes(p, n_matsubara));
}

double sigma_z_expectation(const DensityMatrix& rho, double tol) {
    const cplx tr = rho[0] + rho[3];
    if (std::abs(tr - 1.0) > tol) throw ConfigError("density matrix trace differs from 1");
    if (std::abs(rho[1] - std::conj(rho[2])) > tol || std::abs(rho[0].imag()) > tol ||
        std::abs(rho[3].imag()) > tol)
        throw ConfigError("density matrix is not Hermitian");
    return (rho[0] - rho[3]).real();
}

Trajectory propagate_unitary(const SpinBosonParams& p, const HierarchyConfig& cfg) {
    Trajectory out{p, save_times(cfg), {}};
    const double omega = std::hypot(p.epsilon, p.delta);
    out.values.reserve(out.times.size());
    for (double t : out.times) {
        if (omega == 0.0) {
            out.values.push_back(1.0);
            continue;
        }
        // U = cos(w t/2) - i sin(w t/2) (eps sz + delta sx) / w applied to |+>
        const double c = std::cos(0.5 * omega * t), s = std::sin(0.5 * omega * t);
        const cplx up{c, -s * p.epsilon / omega};
        const cplx dn{0.0, -s * p.delta / omega};
        out.values.push_back(std::norm(up) - std::norm(dn));
    }
    return out;
}

Trajectory propagate_fixed(const SpinBosonParams& p, const HierarchyConfig& cfg, PropagationStats* stats) {
    p.validate();
    cfg.validate(p);
    if (p.lambda == 0.0) {
        if (stats) *stats = PropagationStats{1, 0.0, 0.0, 0.0};
        return propagate_unitary(p, cfg);
    }

    const auto modes = cfg.decomposition == BathDecomposition::pade
                           ? bath_correlation_modes_pade(p, cfg.n_matsubara)
                           : bath_correlation_modes(p, cfg.n_matsubara);
    const ModeSet set = heom_modes(modes);
    // number of index vectors with entries summing to at most depth
    double n_ado_needed = 1.0;
    for (std::size_t k = 1; k <= set.modes.size(); ++k) n_ado_needed *= (cfg.depth + static_cast<double>(k)) / k;
    if (n_ado_needed > static_cast<double>(cfg.max_auxiliary)) {
        std::ostringstream msg;
        msg << "hierarchy at depth " << cfg.depth << ", n_matsubara " << cfg.n_matsubara << " needs "
            << static_cast<std::uint64_t>(n_ado_needed) << " auxiliary matrices (max_auxiliary " << cfg.max_auxiliary
            << ")";
        throw HierarchyTooLarge(msg.str());
    }
    const Hierarchy hier = build_hierarchy(set, cfg.depth);
    const double tail = cfg.terminator ? tail_weight(p, modes) : 0.0;
    const HierarchyRhs rhs(p, set, hier, tail);

    const auto steps_per_save =
        static_cast<std::size_t>(std::ceil(cfg.dt_save / cfg.dt_integrate - 1e-9));
    const double h = cfg.dt_save / static_cast<double>(steps_per_save);

    const std::size_t n_ado = hier.index.size();
    std::vector<EtdWeights> weights(n_ado);
    {
        std::unordered_map<double, EtdWeights> cache;
        for (std::size_t a = 0; a < n_ado; ++a) {
            auto it = cache.find(hier.decay[a]);
            if (it == cache.end()) it = cache.emplace(hier.decay[a], etd_weights(hier.decay[a], h)).first;
            weights[a] = it->second;
        }
    }

    std::vector<DensityMatrix> u(n_ado), a(n_ado), b(n_ado), c(n_ado);
    std::vector<DensityMatrix> nu(n_ado), na(n_ado), nb(n_ado), nc(n_ado);
    u[0] = {cplx(1.0), cplx(0.0), cplx(0.0), cplx(0.0)};

    PropagationStats st;
    st.n_auxiliary = n_ado;
    Trajectory out{p, save_times(cfg), {}};
    out.values.reserve(out.times.size());
    track_stats(u[0], st);
    out.values.push_back((u[0][0] - u[0][3]).real());

    for (std::size_t save = 1; save < out.times.size(); ++save) {
        for (std::size_t step = 0; step < steps_per_save; ++step) {
            rhs(u, nu);
            for (std::size_t i = 0; i < n_ado; ++i)
                for (int e = 0; e < 4; ++e) a[i][e] = weights[i].e_half * u[i][e] + weights[i].half_step * nu[i][e];
            rhs(a, na);
            for (std::size_t i = 0; i < n_ado; ++i)
                for (int e = 0; e < 4; ++e) b[i][e] = weights[i].e_half * u[i][e] + weights[i].half_step * na[i][e];
            rhs(b, nb);
            for (std::size_t i = 0; i < n_ado; ++i)
                for (int e = 0; e < 4; ++e)
                    c[i][e] = weights[i].e_half * a[i][e] + weights[i].half_step * (2.0 * nb[i][e] - nu[i][e]);
            rhs(c, nc);
            for (std::size_t i = 0; i < n_ado; ++i) {
                const auto& w = weights[i];
                for (int e = 0; e < 4; ++e)
                    u[i][e] = w.e_full * u[i][e] + w.f1 * nu[i][e] + 2.0 * w.f2 * (na[i][e] + nb[i][e]) +
                              w.f3 * nc[i][e];
            }
        }
        const auto& r = u[0];
        for (const auto& z : r) {
            if (!std::isfinite(z.real()) || !std::isfinite(z.imag()) || std::abs(z) > 1e6) {
                std::ostringstream msg;
                msg << "hierarchy overflow/NaN at t=" << out.times[save] << " (depth " << cfg.depth
                    << ", n_matsubara " << cfg.n_matsubara << ")";
                throw NumericalError(msg.str());
            }
        }
        track_stats(r, st);
        out.values.push_back((r[0] - r[3]).real());
    }
    if (stats) *stats = st;
    return out;
}

Trajectory heom_propagate(const SpinBosonParams& p, const HierarchyConfig& cfg, ConvergenceReport* report) {
    p.validate();
    cfg.validate(p);
    if (p.lambda == 0.0) {
        if (report) *report = ConvergenceReport{0, 0, 0.0, 0};
        return propagate_unitary(p, cfg);
    }

    HierarchyConfig cur = cfg;
    int runs = 0;
    // Truncations whose coupling structure is unstable (typically a single Pade pole close to
    // omega_c) overflow; they count as unconverged and are cured by adding poles.
    std::map<std::pair<int, int>, std::optional<Trajectory>> done;
    std::string last_failure;
    auto run = [&](int depth, int poles) -> const std::optional<Trajectory>& {
        if (auto it = done.find({depth, poles}); it != done.end()) return it->second;
        HierarchyConfig c = cfg;
        c.depth = depth;
        c.n_matsubara = poles;
        ++runs;
        std::optional<Trajectory> t;
        try {
            t = propagate_fixed(p, c);
        } catch (const HierarchyTooLarge& e) {
            throw NumericalError(std::string("HEOM not converged within the size limit: ") + e.what() + " for " +
                                 trajectory_filename(p));
        } catch (const NumericalError& e) {
            last_failure = e.what();
        }
        return done.emplace(std::pair{depth, poles}, std::move(t)).first->second;
    };
    auto max_diff = [](const Trajectory& a, const Trajectory& b) {
        double r = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) r = std::max(r, std::abs(a.values[i] - b.values[i]));
        return r;
    };
    auto give_up = [&](double residual) {
        std::ostringstream msg;
        msg << "HEOM not converged at depth " << cur.depth << ", n_matsubara " << cur.n_matsubara;
        if (std::isfinite(residual))
            msg << ": residual " << residual << " > " << cfg.convergence_tol;
        else
            msg << ": " << last_failure;
        msg << " for " << trajectory_filename(p);
        throw NumericalError(msg.str());
    };
    // First stable truncation at the current depth, adding poles as needed.
    auto settle = [&]() {
        for (;;) {
            if (const auto& t = run(cur.depth, cur.n_matsubara)) return *t;
            if (cur.n_matsubara + 1 >= cfg.max_matsubara) give_up(HUGE_VAL);
            ++cur.n_matsubara;
        }
    };

    // Greedy refinement: step whichever of depth and pole count changes the result more, until
    // both changes are within half the tolerance; then the joint (depth+1, poles+1) test decides.
    // An unstable finer run counts as an infinite change.
    const double half_tol = 0.5 * cfg.convergence_tol;
    auto change = [&](const Trajectory& from, int depth, int poles) {
        const auto& t = run(depth, poles);
        return t ? max_diff(from, *t) : HUGE_VAL;
    };
    Trajectory coarse = settle();
    for (;;) {
        const double r_depth = change(coarse, cur.depth + 1, cur.n_matsubara);
        const double r_poles = change(coarse, cur.depth, cur.n_matsubara + 1);
        if (r_depth <= half_tol && r_poles <= half_tol) {
            const double r = change(coarse, cur.depth + 1, cur.n_matsubara + 1);
            if (r <= cfg.convergence_tol) {
                if (report) *report = ConvergenceReport{cur.depth, cur.n_matsubara, r, runs};
                return coarse;
            }
            if (cur.depth + 1 >= cfg.max_depth || cur.n_matsubara + 1 >= cfg.max_matsubara) give_up(r);
            ++cur.depth;
            ++cur.n_matsubara;
        } else if (r_poles >= r_depth) {
            if (cur.n_matsubara + 1 >= cfg.max_matsubara) give_up(r_poles);
            ++cur.n_matsubara;
        } else {
            if (cur.depth + 1 >= cfg.max_depth) give_up(r_depth);
            ++cur.depth;
        }
        coarse = settle();
    }
}

std::string trajectory_filename(const SpinBosonParams& p) {
    return "traj_eps" + format_number(p.epsilon) + "_lam" + format_number(p.lambda) + "_wc" +
           format_number(p.omega_c) + "_beta" + format_number(p.beta) + ".csv";
}

SpinBosonParams parse_trajectory_filename(const std::string& name) {
    SpinBosonParams p;
    const auto fail = [&] { throw ConfigError("cannot parse trajectory file name '" + name + "'"); };
    auto field = [&](const std::string& tag, const std::string& next) {
        const auto b = name.find(tag);
        if (b == std::string::npos) fail();
        const auto start = b + tag.size();
        const auto e = name.find(next, start);
        if (e == std::string::npos) fail();
        try {
            return std::stod(name.substr(start, e - start));
        } catch (const std::exception&) {
            fail();
        }
        return 0.0;
    };
    p.epsilon = field("eps", "_lam");
    p.lambda = field("_lam", "_wc");
    p.omega_c = field("_wc", "_beta");
    p.beta = field("_beta", ".csv");
    return p;
}

void write_trajectory_csv(const Trajectory& traj, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw MissingInputError("cannot write " + path.string());
    os << "t,sigma_z\n" << std::setprecision(17);
    for (std::size_t i = 0; i < traj.size(); ++i) os << traj.times[i] << ',' << traj.values[i] << '\n';
}

Trajectory read_trajectory_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw MissingInputError("missing trajectory file " + path.string());
    Trajectory traj;
    traj.params = parse_trajectory_filename(path.filename().string());
    std::string line;
    std::getline(is, line);
    if (line != "t,sigma_z") throw ConfigError(path.string() + ": expected header 't,sigma_z'");
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw ConfigError(path.string() + ": malformed row '" + line + "'");
        traj.times.push_back(std::stod(line.substr(0, comma)));
        traj.values.push_back(std::stod(line.substr(comma + 1)));
    }
    return traj;
}

}  // namespace qdbench::refdyn
