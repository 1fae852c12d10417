// Python bindings: _qdbench.

#include <sstream>

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "qdbench/cli.hpp"
#include "qdbench/datapipe.hpp"
#include "qdbench/errors.hpp"
#include "qdbench/forecast.hpp"
#include "qdbench/krr.hpp"
#include "qdbench/nnet.hpp"
#include "qdbench/pso.hpp"
#include "qdbench/refdyn.hpp"

namespace py = pybind11;
using namespace qdbench;

namespace {

data::Dataset to_dataset(const krr::RowMatrix& x, const Eigen::VectorXd& y) {
    if (x.rows() != y.size()) throw ConfigError("inputs and labels differ in length");
    data::Dataset d;
    d.window_length = static_cast<std::size_t>(x.cols());
    d.samples.resize(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        auto& s = d.samples[static_cast<std::size_t>(i)];
        s.input.assign(x.row(i).data(), x.row(i).data() + x.cols());
        s.label = y(i);
    }
    return d;
}

std::vector<double> forecast_with(const forecast::Forecaster& f, const std::vector<double>& seed, std::size_t n) {
    return forecast::recursive_forecast(f, seed, n);
}

}  // namespace

PYBIND11_MODULE(_qdbench, m) {
    m.doc() = "Spin-boson dynamics benchmark core";

    auto numerical = py::register_exception<NumericalError>(m, "NumericalError", PyExc_RuntimeError);
    py::register_exception<forecast::DivergenceError>(m, "DivergenceError", numerical.ptr());
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<MissingInputError>(m, "MissingInputError", PyExc_FileNotFoundError);

    // reference dynamics
    py::class_<refdyn::SpinBosonParams>(m, "SpinBosonParams")
        .def(py::init([](double epsilon, double delta, double lambda_, double omega_c, double beta) {
                 return refdyn::SpinBosonParams{epsilon, delta, lambda_, omega_c, beta};
             }),
             py::arg("epsilon") = 0.0, py::arg("delta") = 1.0, py::arg("lambda_") = 0.1, py::arg("omega_c") = 1.0,
             py::arg("beta") = 1.0)
        .def_readwrite("epsilon", &refdyn::SpinBosonParams::epsilon)
        .def_readwrite("delta", &refdyn::SpinBosonParams::delta)
        .def_readwrite("lambda_", &refdyn::SpinBosonParams::lambda)
        .def_readwrite("omega_c", &refdyn::SpinBosonParams::omega_c)
        .def_readwrite("beta", &refdyn::SpinBosonParams::beta)
        .def("__repr__", [](const refdyn::SpinBosonParams& p) {
            std::ostringstream s;
            s << "SpinBosonParams(epsilon=" << p.epsilon << ", delta=" << p.delta << ", lambda_=" << p.lambda
              << ", omega_c=" << p.omega_c << ", beta=" << p.beta << ")";
            return s.str();
        });

    py::class_<refdyn::HierarchyConfig>(m, "HierarchyConfig")
        .def(py::init<>())
        .def_readwrite("depth", &refdyn::HierarchyConfig::depth)
        .def_readwrite("n_matsubara", &refdyn::HierarchyConfig::n_matsubara)
        .def_readwrite("dt_integrate", &refdyn::HierarchyConfig::dt_integrate)
        .def_readwrite("t_max", &refdyn::HierarchyConfig::t_max)
        .def_readwrite("dt_save", &refdyn::HierarchyConfig::dt_save)
        .def_readwrite("terminator", &refdyn::HierarchyConfig::terminator)
        .def_readwrite("convergence_tol", &refdyn::HierarchyConfig::convergence_tol)
        .def_readwrite("max_depth", &refdyn::HierarchyConfig::max_depth)
        .def_readwrite("max_matsubara", &refdyn::HierarchyConfig::max_matsubara)
        .def_readwrite("max_auxiliary", &refdyn::HierarchyConfig::max_auxiliary);

    py::class_<refdyn::Trajectory>(m, "Trajectory")
        .def(py::init<>())
        .def_readwrite("params", &refdyn::Trajectory::params)
        .def_readwrite("times", &refdyn::Trajectory::times)
        .def_readwrite("values", &refdyn::Trajectory::values)
        .def("__len__", &refdyn::Trajectory::size);

    m.def("heom_propagate",
          [](const refdyn::SpinBosonParams& p, const refdyn::HierarchyConfig& cfg) {
              py::gil_scoped_release release;
              return refdyn::heom_propagate(p, cfg);
          },
          py::arg("params"), py::arg("config") = refdyn::HierarchyConfig{});
    m.def("propagate_fixed",
          [](const refdyn::SpinBosonParams& p, const refdyn::HierarchyConfig& cfg) {
              py::gil_scoped_release release;
              return refdyn::propagate_fixed(p, cfg);
          },
          py::arg("params"), py::arg("config") = refdyn::HierarchyConfig{});
    m.def("trajectory_filename", &refdyn::trajectory_filename);
    m.def("write_trajectory_csv", &refdyn::write_trajectory_csv);
    m.def("read_trajectory_csv", &refdyn::read_trajectory_csv);

    // data pipeline
    m.def(
        "parameter_grid",
        [](const std::string& name) {
            if (name == "full") return data::parameter_grid(data::GridSpec::full());
            if (name == "symmetric") return data::parameter_grid(data::GridSpec::symmetric());
            if (name == "asymmetric") return data::parameter_grid(data::GridSpec::asymmetric());
            throw ConfigError("unknown grid '" + name + "'");
        },
        py::arg("name") = "full");
    m.def(
        "slice_trajectory",
        [](const std::vector<double>& values, std::size_t slice_length) {
            refdyn::Trajectory t;
            t.values = values;
            t.times.resize(values.size());
            const auto samples = data::slice_trajectory(t, slice_length);
            krr::RowMatrix x(static_cast<Eigen::Index>(samples.size()), static_cast<Eigen::Index>(slice_length - 1));
            Eigen::VectorXd y(x.rows());
            for (Eigen::Index i = 0; i < x.rows(); ++i) {
                const auto& s = samples[static_cast<std::size_t>(i)];
                for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = s.input[static_cast<std::size_t>(j)];
                y(i) = s.label;
            }
            return py::make_tuple(x, y);
        },
        py::arg("values"), py::arg("slice_length") = 42, "Stride-1 windows as (inputs, labels).");
    m.def(
        "holdout_select",
        [](std::size_t count, std::size_t n, std::uint64_t seed) {
            const auto s = data::holdout_select(count, n, seed);
            return py::make_tuple(s.holdout, s.remaining);
        },
        py::arg("count"), py::arg("n"), py::arg("seed"));

    // kernel ridge regression
    py::class_<krr::KernelSpec>(m, "KernelSpec")
        .def_static("linear", &krr::KernelSpec::linear)
        .def_static("gaussian", &krr::KernelSpec::gaussian, py::arg("sigma"))
        .def_static("exponential", &krr::KernelSpec::exponential, py::arg("sigma"))
        .def_static("matern", &krr::KernelSpec::matern, py::arg("sigma"), py::arg("n"))
        .def_static("decaying_periodic", &krr::KernelSpec::decaying_periodic, py::arg("sigma"), py::arg("period"),
                    py::arg("sigma_p"))
        .def_property_readonly("family", [](const krr::KernelSpec& k) { return krr::to_string(k.family); })
        .def_readonly("sigma", &krr::KernelSpec::sigma)
        .def_readonly("n", &krr::KernelSpec::n)
        .def_readonly("period", &krr::KernelSpec::period)
        .def_readonly("sigma_p", &krr::KernelSpec::sigma_p);

    m.def(
        "kernel_eval",
        [](const krr::KernelSpec& k, const std::vector<double>& a, const std::vector<double>& b) {
            return krr::kernel_eval(k, a, b);
        },
        py::arg("spec"), py::arg("a"), py::arg("b"));

    py::class_<krr::KrrModel>(m, "KrrModel")
        .def_readonly("spec", &krr::KrrModel::spec)
        .def_readonly("lambda_reg", &krr::KrrModel::lambda_reg)
        .def_readonly("alphas", &krr::KrrModel::alphas)
        .def_property_readonly("window_length", &krr::KrrModel::window_length)
        .def("__len__", &krr::KrrModel::size);

    m.def(
        "krr_train",
        [](const krr::RowMatrix& x, const Eigen::VectorXd& y, const krr::KernelSpec& spec, double lambda_reg) {
            py::gil_scoped_release release;
            return krr::krr_train(x, y, spec, lambda_reg);
        },
        py::arg("x"), py::arg("y"), py::arg("spec"), py::arg("lambda_reg"));
    m.def(
        "krr_predict", [](const krr::KrrModel& model, const krr::RowMatrix& x) { return krr::krr_predict(model, x); },
        py::arg("model"), py::arg("x"));
    m.def(
        "krr_search",
        [](const krr::RowMatrix& xt, const Eigen::VectorXd& yt, const krr::RowMatrix& xv, const Eigen::VectorXd& yv,
           const krr::KernelSpec& base, int stride, std::uint64_t seed) {
            const auto tr = to_dataset(xt, yt), va = to_dataset(xv, yv);
            py::gil_scoped_release release;
            const auto r = krr::hyperparameter_search(tr, va, base, krr::SearchGrid::log2_default(stride), seed);
            return py::make_tuple(r.spec, r.lambda_reg, r.validation_mae);
        },
        py::arg("x_train"), py::arg("y_train"), py::arg("x_val"), py::arg("y_val"), py::arg("base"),
        py::arg("stride") = 1, py::arg("seed") = 0, "Returns (spec, lambda_reg, validation_mae).");
    m.def("save_krr", &krr::save_model);
    m.def("load_krr", &krr::load_model);

    // neural networks
    py::class_<nn::TrainOpts>(m, "TrainOpts")
        .def(py::init<>())
        .def_readwrite("learning_rate", &nn::TrainOpts::learning_rate)
        .def_readwrite("batch_size", &nn::TrainOpts::batch_size)
        .def_readwrite("epochs", &nn::TrainOpts::epochs)
        .def_readwrite("clip_norm", &nn::TrainOpts::clip_norm)
        .def_readwrite("seed", &nn::TrainOpts::seed);

    py::class_<nn::NetModel>(m, "NetModel")
        .def_property_readonly("name", [](const nn::NetModel& n) { return n.spec.name; })
        .def_readonly("parameters", &nn::NetModel::parameters)
        .def_property_readonly("parameter_count", [](const nn::NetModel& n) { return n.parameters.size(); });

    m.def("architecture_ids", &nn::architecture_ids);
    m.def(
        "count_parameters", [](const std::string& id) { return nn::count_parameters(nn::architecture(id)); },
        py::arg("architecture_id"));
    m.def(
        "build_model", [](const std::string& id, std::uint64_t seed) { return nn::build_model(id, seed); },
        py::arg("architecture_id"), py::arg("seed") = 0);
    m.def(
        "net_predict", [](const nn::NetModel& model, const krr::RowMatrix& x) { return nn::predict(model, x); },
        py::arg("model"), py::arg("x"));
    m.def(
        "net_train",
        [](const nn::NetModel& model, const krr::RowMatrix& x, const Eigen::VectorXd& y, const krr::RowMatrix& xv,
           const Eigen::VectorXd& yv, const nn::TrainOpts& opts) {
            const auto tr = to_dataset(x, y), va = to_dataset(xv, yv);
            py::gil_scoped_release release;
            auto r = nn::train(model, tr, va.empty() ? nullptr : &va, opts);
            std::vector<std::pair<double, double>> history;
            for (const auto& e : r.history.epochs) history.emplace_back(e.train_mse, e.val_mse);
            return std::make_pair(std::move(r.model), history);
        },
        py::arg("model"), py::arg("x"), py::arg("y"), py::arg("x_val"), py::arg("y_val"),
        py::arg("opts") = nn::TrainOpts{}, "Returns (trained model, [(train_mse, val_mse) per epoch]).");
    m.def("save_net", &nn::save_model);
    m.def("load_net", &nn::load_model);

    // particle swarm
    m.def(
        "pso_optimize",
        [](const std::function<double(const Eigen::VectorXd&)>& f, const std::vector<std::pair<double, double>>& bounds,
           int n_particles, int n_generations, bool classical, std::uint64_t seed) {
            pso::PsoConfig c;
            for (const auto& [lo, hi] : bounds) c.bounds.push_back({lo, hi});
            c.n_particles = n_particles;
            c.n_generations = n_generations;
            c.stochastic = classical;
            c.move_with_new_velocity = classical;
            c.seed = seed;
            const auto r = pso::pso_optimize(f, c);
            std::vector<double> best_per_generation;
            for (std::size_t i = 0; i < r.history.size(); ++i)
                if ((i + 1) % static_cast<std::size_t>(n_particles) == 0) best_per_generation.push_back(r.history[i].best_fitness);
            return py::make_tuple(r.best_position, r.best_fitness, best_per_generation);
        },
        py::arg("objective"), py::arg("bounds"), py::arg("n_particles") = 3, py::arg("n_generations") = 50,
        py::arg("classical") = false, py::arg("seed") = 0,
        "Returns (best_position, best_fitness, swarm best after each generation).");

    // forecasting
    m.def(
        "forecast_krr",
        [](const krr::KrrModel& model, const std::vector<double>& seed, std::size_t n) {
            return forecast_with(forecast::Forecaster::from_krr("krr", model), seed, n);
        },
        py::arg("model"), py::arg("seed_window"), py::arg("n_steps"));
    m.def(
        "forecast_net",
        [](const nn::NetModel& model, const std::vector<double>& seed, std::size_t n) {
            return forecast_with(forecast::Forecaster::from_net(model.spec.name, model), seed, n);
        },
        py::arg("model"), py::arg("seed_window"), py::arg("n_steps"));
    m.def(
        "evaluate_mae",
        [](const std::vector<double>& p, const std::vector<double>& r) { return forecast::evaluate_mae(p, r); },
        py::arg("predicted"), py::arg("reference"));

    // command line
    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            int code;
            {
                py::gil_scoped_release release;
                code = cli::run_command(args, out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs a qdbench command; returns (exit_status, stdout, stderr).");
}
