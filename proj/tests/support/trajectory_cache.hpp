// HEOM trajectories for tests, generated once and kept under the build tree.
#pragma once

#include <filesystem>
#include <vector>

#include "qdbench/datapipe.hpp"
#include "qdbench/refdyn.hpp"

namespace qdbench::testing {

inline std::filesystem::path cache_dir() {
#ifdef QDBENCH_TEST_CACHE
    std::filesystem::path dir = QDBENCH_TEST_CACHE;
#else
    std::filesystem::path dir = std::filesystem::temp_directory_path() / "qdbench_test_cache";
#endif
    std::filesystem::create_directories(dir);
    return dir;
}

inline refdyn::Trajectory cached_trajectory(const refdyn::SpinBosonParams& p) {
    const auto path = cache_dir() / refdyn::trajectory_filename(p);
    if (std::filesystem::exists(path)) {
        auto t = refdyn::read_trajectory_csv(path);
        t.params = p;
        return t;
    }
    auto t = refdyn::heom_propagate(p, refdyn::HierarchyConfig{});
    const auto tmp = path.string() + ".tmp";
    refdyn::write_trajectory_csv(t, tmp);
    std::filesystem::rename(tmp, path);
    return t;
}

inline std::vector<refdyn::Trajectory> cached_trajectories(const std::vector<refdyn::SpinBosonParams>& ps) {
    std::vector<refdyn::Trajectory> out;
    out.reserve(ps.size());
    for (const auto& p : ps) out.push_back(cached_trajectory(p));
    return out;
}

}  // namespace qdbench::testing
