// Reference dynamics for the spin-boson model with a Debye (Drude-Lorentz) bath.
//
// Trajectories of <sigma_z(t)> are produced with the hierarchical equations of
// motion (HEOM). All energies are in units of the tunneling element, times in
// units of its inverse, hbar = 1. The system starts in |+><+| and the bath in
// thermal equilibrium at inverse temperature beta.
#pragma once

#include <array>
#include <complex>
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace qdbench::refdyn {

using cplx = std::complex<double>;

struct SpinBosonParams {
    double epsilon{0.0};   // energy bias
    double delta{1.0};     // tunneling element
    double lambda{0.1};    // reorganization energy
    double omega_c{1.0};   // bath cutoff frequency
    double beta{1.0};      // inverse temperature

    // Throws ConfigError. delta == 0 is accepted (frozen-population limit).
    void validate() const;
};

// Low-temperature expansion of the bath correlation function: plain Matsubara
// poles, or the Pade spectrum decomposition of the Bose function (same Drude pole,
// far fewer poles for a given accuracy).
enum class BathDecomposition { matsubara, pade };

struct HierarchyConfig {
    // Starting truncation; heom_propagate refines both upward.
    int depth{6};
    // Number of low-temperature poles after the Drude pole.
    int n_matsubara{1};
    BathDecomposition decomposition{BathDecomposition::pade};
    double dt_integrate{0.01};
    double t_max{20.0};
    double dt_save{0.1};
    // Markovian treatment of the Matsubara tail beyond n_matsubara.
    bool terminator{true};
    // Self-convergence tolerance between (depth, n_matsubara) and (depth+1, n_matsubara+1).
    double convergence_tol{1e-4};
    // Refinement gives up when either limit would be reached.
    int max_depth{48};
    int max_matsubara{10};
    // Largest hierarchy (number of auxiliary density matrices) a run may allocate.
    std::size_t max_auxiliary{1000000};

    void validate(const SpinBosonParams& p) const;
    std::size_t n_saved() const;
};

struct Trajectory {
    SpinBosonParams params;
    std::vector<double> times;
    std::vector<double> values;

    std::size_t size() const { return values.size(); }
};

// Row-major 2x2 density matrix {rho00, rho01, rho10, rho11}.
using DensityMatrix = std::array<cplx, 4>;

struct BathMode {
    cplx coefficient;
    double decay_rate;
};

double debye_spectral_density(double omega, const SpinBosonParams& p);

// Exponential decomposition C(t) = sum_k c_k exp(-gamma_k t), t >= 0, of the bath
// correlation function. First entry is the Drude pole, followed by n_matsubara
// Matsubara terms with rates 2*pi*k/beta.
std::vector<BathMode> bath_correlation_modes(const SpinBosonParams& p, int n_matsubara);

// Drude pole followed by n_poles Pade poles.
std::vector<BathMode> bath_correlation_modes_pade(const SpinBosonParams& p, int n_poles);

// Sum over the Matsubara terms k > n_matsubara of c_k / nu_k (closed form).
double matsubara_tail_weight(const SpinBosonParams& p, int n_matsubara);

double sigma_z_expectation(const DensityMatrix& rho, double tol = 1e-8);

struct PropagationStats {
    std::size_t n_auxiliary{0};
    double max_trace_error{0.0};
    double max_hermiticity_error{0.0};
    double min_eigenvalue{1.0};
};

// One fixed-truncation hierarchy run (no refinement).
Trajectory propagate_fixed(const SpinBosonParams& p, const HierarchyConfig& cfg,
                           PropagationStats* stats = nullptr);

struct ConvergenceReport {
    int depth{0};
    int n_matsubara{0};
    double residual{0.0};   // max |difference| against the (depth+1, n_matsubara+1) run
    int runs{0};            // hierarchy propagations performed
};

// Refines (depth, n_matsubara) until rerunning with (depth+1, n_matsubara+1) changes no
// saved value by more than convergence_tol; returns the coarser of the two runs.
// Throws NumericalError on non-convergence (with the residual) or NaN/overflow.
Trajectory heom_propagate(const SpinBosonParams& p, const HierarchyConfig& cfg,
                          ConvergenceReport* report = nullptr);

// Pure system evolution, lambda == 0.
Trajectory propagate_unitary(const SpinBosonParams& p, const HierarchyConfig& cfg);

// "t,sigma_z" CSV with 17 significant digits.
void write_trajectory_csv(const Trajectory& traj, const std::filesystem::path& path);
// Parameters are recovered from the file name (delta is taken as 1).
Trajectory read_trajectory_csv(const std::filesystem::path& path);
std::string trajectory_filename(const SpinBosonParams& p);
SpinBosonParams parse_trajectory_filename(const std::string& name);

}  // namespace qdbench::refdyn
