// Parameter grids, window slicing, and hold-out / sub-training / validation splits.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "qdbench/refdyn.hpp"

namespace qdbench::data {

struct GridSpec {
    std::vector<double> epsilon_values;
    std::vector<double> lambda_values;
    std::vector<double> omega_c_values;
    std::vector<double> beta_values;

    void validate() const;
    std::size_t size() const;

    // eps {0, 1}, lambda {0.1..1.0}, omega_c {1..10}, beta {0.1, 0.25, 0.5, 0.75, 1}.
    static GridSpec full();
    static GridSpec symmetric();   // full() restricted to eps = 0
    static GridSpec asymmetric();  // full() restricted to eps = 1
};

// Cartesian product, epsilon outermost then lambda, omega_c, beta. delta = 1.
std::vector<refdyn::SpinBosonParams> parameter_grid(const GridSpec& spec);

enum class SplitTag { train, subtrain, validation, holdout };
std::string to_string(SplitTag tag);

struct SlicedSample {
    std::vector<double> input;
    double label{0.0};
    std::size_t grid_id{0};
    std::size_t offset{0};
};

struct Dataset {
    std::vector<SlicedSample> samples;
    std::size_t window_length{0};
    SplitTag split{SplitTag::train};

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
};

// Stride-1 windows of slice_length P: L - P + 1 samples, each with P - 1 inputs.
std::vector<SlicedSample> slice_trajectory(const refdyn::Trajectory& traj, std::size_t slice_length,
                                           std::size_t grid_id = 0);

struct HoldoutSplit {
    std::vector<std::size_t> holdout;    // ascending
    std::vector<std::size_t> remaining;  // ascending
};

// Random choice of n of `count` trajectory ids.
HoldoutSplit holdout_select(std::size_t count, std::size_t n, std::uint64_t seed);

// Sample-level partition; sizes floor(fraction * N) and the remainder.
std::pair<Dataset, Dataset> split_subtrain(const Dataset& train, double fraction, std::uint64_t seed);

// Slices every trajectory (grid id = position in `trajectories` unless ids are given)
// and shuffles the pooled samples once with `seed`.
Dataset build_dataset(const std::vector<refdyn::Trajectory>& trajectories, std::size_t slice_length,
                      std::uint64_t seed, const std::vector<std::size_t>& grid_ids = {});

// Seeded subset of n samples (all of them when n >= size), order preserved.
Dataset subsample(const Dataset& data, std::size_t n, std::uint64_t seed);

// "grid_id,offset,x_1,...,x_T,y" with 17 significant digits.
void write_dataset_csv(const Dataset& data, const std::filesystem::path& path);
Dataset read_dataset_csv(const std::filesystem::path& path, SplitTag split = SplitTag::train);

}  // namespace qdbench::data
