#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "qdbench/datapipe.hpp"
#include "qdbench/errors.hpp"

using namespace qdbench;
using namespace qdbench::data;

namespace {

refdyn::Trajectory ramp(std::size_t n, double scale = 1.0) {
    refdyn::Trajectory t;
    for (std::size_t i = 0; i < n; ++i) {
        t.times.push_back(0.1 * static_cast<double>(i));
        t.values.push_back(scale * std::cos(0.37 * static_cast<double>(i)));
    }
    return t;
}

}  // namespace

TEST_CASE("grid sizes") {
    CHECK(parameter_grid(GridSpec::full()).size() == 1000);
    CHECK(parameter_grid(GridSpec::symmetric()).size() == 500);
    CHECK(parameter_grid(GridSpec::asymmetric()).size() == 500);
    GridSpec one{{0.0}, {0.1}, {1.0}, {1.0}};
    CHECK(parameter_grid(one).size() == 1);
    GridSpec empty{{0.0}, {}, {1.0}, {1.0}};
    CHECK_THROWS_AS(parameter_grid(empty), ConfigError);
}

TEST_CASE("grid order is lexicographic with beta fastest") {
    const auto g = parameter_grid(GridSpec::full());
    CHECK(g[0].epsilon == 0.0);
    CHECK(g[0].lambda == doctest::Approx(0.1));
    CHECK(g[1].beta == 0.25);
    CHECK(g[5].omega_c == 2.0);
    CHECK(g[50].lambda == doctest::Approx(0.2));
    CHECK(g[500].epsilon == 1.0);
    for (const auto& p : g) CHECK(p.delta == 1.0);
}

TEST_CASE("slicing examples") {
    refdyn::Trajectory t;
    t.values = {1, 2, 3, 4};
    t.times = {0, 1, 2, 3};
    const auto s = slice_trajectory(t, 3, 7);
    REQUIRE(s.size() == 2);
    CHECK(s[0].input == std::vector<double>{1, 2});
    CHECK(s[0].label == 3);
    CHECK(s[1].input == std::vector<double>{2, 3});
    CHECK(s[1].label == 4);
    CHECK(s[1].grid_id == 7);
    CHECK(s[1].offset == 1);

    refdyn::Trajectory two;
    two.values = {0.5, 0.25};
    two.times = {0, 1};
    const auto s2 = slice_trajectory(two, 2);
    REQUIRE(s2.size() == 1);
    CHECK(s2[0].input == std::vector<double>{0.5});
    CHECK(s2[0].label == 0.25);

    const auto s3 = slice_trajectory(ramp(201), 42);
    CHECK(s3.size() == 160);
    CHECK(s3[0].input.size() == 41);
}

TEST_CASE("slicing too short a trajectory names both lengths") {
    try {
        slice_trajectory(ramp(10), 42);
        FAIL("expected failure");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("10") != std::string::npos);
        CHECK(msg.find("42") != std::string::npos);
    }
}

TEST_CASE("windows and labels reconstruct the trajectory bit for bit") {
    const auto t = ramp(201, 0.9);
    const auto s = slice_trajectory(t, 42);
    std::vector<double> rebuilt = s[0].input;
    for (const auto& x : s) rebuilt.push_back(x.label);
    CHECK(rebuilt == t.values);
}

TEST_CASE("holdout selection") {
    const auto a = holdout_select(1000, 100, 11);
    CHECK(a.holdout.size() == 100);
    CHECK(a.remaining.size() == 900);
    std::set<std::size_t> all(a.holdout.begin(), a.holdout.end());
    all.insert(a.remaining.begin(), a.remaining.end());
    CHECK(all.size() == 1000);
    const auto b = holdout_select(1000, 100, 11);
    CHECK(a.holdout == b.holdout);
    const auto c = holdout_select(1000, 100, 12);
    CHECK(a.holdout != c.holdout);
    const auto none = holdout_select(5, 0, 1);
    CHECK(none.holdout.empty());
    CHECK(none.remaining.size() == 5);
    CHECK_THROWS_AS(holdout_select(5, 6, 1), ConfigError);
}

TEST_CASE("pipeline counts at the full scale") {
    std::vector<refdyn::Trajectory> trajs(900, ramp(201));
    const auto ds = build_dataset(trajs, 42, 3);
    CHECK(ds.size() == 144000);
    const auto [sub, val] = split_subtrain(ds, 0.8, 5);
    CHECK(sub.size() == 115200);
    CHECK(val.size() == 28800);
    CHECK(sub.split == SplitTag::subtrain);
    CHECK(val.split == SplitTag::validation);
}

TEST_CASE("sub-training split") {
    Dataset two{{}, 1, SplitTag::train};
    two.samples = {{{0.1}, 0.2, 0, 0}, {{0.3}, 0.4, 0, 1}};
    const auto [a, b] = split_subtrain(two, 0.5, 1);
    CHECK(a.size() == 1);
    CHECK(b.size() == 1);
    CHECK_THROWS_AS(split_subtrain(two, 1.0, 1), ConfigError);
    CHECK_THROWS_AS(split_subtrain(Dataset{}, 0.5, 1), ConfigError);

    const auto ds = build_dataset({ramp(60), ramp(60, 0.5)}, 10, 9);
    const auto [s1, v1] = split_subtrain(ds, 0.8, 4);
    const auto [s2, v2] = split_subtrain(ds, 0.8, 4);
    REQUIRE(s1.size() == s2.size());
    for (std::size_t i = 0; i < s1.size(); ++i) {
        CHECK(s1.samples[i].grid_id == s2.samples[i].grid_id);
        CHECK(s1.samples[i].offset == s2.samples[i].offset);
    }
}

TEST_CASE("holdout trajectories never reach the training samples") {
    std::vector<refdyn::Trajectory> trajs;
    for (int i = 0; i < 20; ++i) trajs.push_back(ramp(60, 0.05 * (i + 1)));
    const auto split = holdout_select(trajs.size(), 4, 21);
    std::vector<refdyn::Trajectory> train;
    for (auto id : split.remaining) train.push_back(trajs[id]);
    const auto ds = build_dataset(train, 10, 2, split.remaining);
    const std::set<std::size_t> held(split.holdout.begin(), split.holdout.end());
    for (const auto& s : ds.samples) CHECK(held.count(s.grid_id) == 0);
    // values unchanged (no normalisation)
    for (const auto& s : ds.samples) {
        const auto& src = trajs[s.grid_id].values;
        for (std::size_t i = 0; i < s.input.size(); ++i) CHECK(s.input[i] == src[s.offset + i]);
        CHECK(s.label == src[s.offset + s.input.size()]);
    }
}

TEST_CASE("subsample keeps order and is seeded") {
    const auto ds = build_dataset({ramp(100)}, 5, 1);
    const auto a = subsample(ds, 30, 8);
    const auto b = subsample(ds, 30, 8);
    REQUIRE(a.size() == 30);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.samples[i].offset == b.samples[i].offset);
    CHECK(subsample(ds, 1000, 8).size() == ds.size());
}

TEST_CASE("dataset csv round trip is exact and deterministic") {
    const auto ds = build_dataset({ramp(30), ramp(30, -0.3)}, 6, 17);
    const auto dir = std::filesystem::temp_directory_path() / "qdbench_datapipe_test";
    std::filesystem::create_directories(dir);
    write_dataset_csv(ds, dir / "a.csv");
    write_dataset_csv(build_dataset({ramp(30), ramp(30, -0.3)}, 6, 17), dir / "b.csv");
    std::ifstream fa(dir / "a.csv"), fb(dir / "b.csv");
    const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
    CHECK(sa == sb);
    CHECK(sa.rfind("grid_id,offset,x_1,x_2,x_3,x_4,x_5,y\n", 0) == 0);

    const auto back = read_dataset_csv(dir / "a.csv");
    REQUIRE(back.size() == ds.size());
    CHECK(back.window_length == 5);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        CHECK(back.samples[i].input == ds.samples[i].input);
        CHECK(back.samples[i].label == ds.samples[i].label);
        CHECK(back.samples[i].grid_id == ds.samples[i].grid_id);
    }
    CHECK_THROWS_AS(read_dataset_csv(dir / "none.csv"), MissingInputError);
    std::filesystem::remove_all(dir);
}
