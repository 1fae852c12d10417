#include "qdbench/nnet.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "qdbench/errors.hpp"

namespace qdbench::nn {

namespace {

using Json = nlohmann::json;
using ConstMap = Eigen::Map<const RowMatrix>;
using Map = Eigen::Map<RowMatrix>;
using StridedMap = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;

std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

template <class M>
void activate(M&& z, Activation f) {
    switch (f) {
        case Activation::tanh: z = z.array().tanh(); break;
        case Activation::sigmoid: z = z.unaryExpr([](double v) { return sigmoid(v); }); break;
        case Activation::relu: z = z.cwiseMax(0.0); break;
        case Activation::linear: break;
    }
}

// dz = dy * f'(z), expressed through y = f(z).
template <class D, class Y>
void activation_backward(D&& dy, const Y& y, Activation f) {
    switch (f) {
        case Activation::tanh: dy.array() *= 1.0 - y.array().square(); break;
        case Activation::sigmoid: dy.array() *= y.array() * (1.0 - y.array()); break;
        case Activation::relu: dy.array() *= (y.array() > 0.0).template cast<double>(); break;
        case Activation::linear: break;
    }
}

int gate_count(CellKind c) {
    switch (c) {
        case CellKind::rnn: return 1;
        case CellKind::lstm: return 4;
        case CellKind::gru: return 3;
    }
    return 1;
}

std::size_t cell_parameter_count(CellKind c, int inputs, int units) {
    const auto k = static_cast<std::size_t>(units), m = static_cast<std::size_t>(inputs);
    const std::size_t g = static_cast<std::size_t>(gate_count(c));
    const std::size_t biases = c == CellKind::gru ? 2 : 1;
    return g * k * (k + m + biases);
}

Shape output_shape(const LayerSpec& l, Shape in) {
    switch (l.kind) {
        case LayerKind::dense: return {1, l.units};
        case LayerKind::flatten: return {1, in.size()};
        case LayerKind::conv1d: {
            const int span = in.length + 2 * l.padding - l.kernel_size;
            if (span < 0)
                throw ConfigError("conv1d kernel size " + std::to_string(l.kernel_size) + " exceeds input length " +
                                  std::to_string(in.length) + " plus padding");
            return {span / l.stride + 1, l.kernels};
        }
        case LayerKind::maxpool1d:
            if (l.pool > in.length)
                throw ConfigError("maxpool1d pool " + std::to_string(l.pool) + " exceeds input length " +
                                  std::to_string(in.length));
            return {(in.length - l.pool) / l.stride + 1, in.channels};
        case LayerKind::rnn:
        case LayerKind::lstm:
        case LayerKind::gru: return {l.return_sequences ? in.length : 1, l.units};
        case LayerKind::bidirectional: return {l.return_sequences ? in.length : 1, 2 * l.units};
    }
    return in;
}

CellKind cell_of(const LayerSpec& l) {
    switch (l.kind) {
        case LayerKind::rnn: return CellKind::rnn;
        case LayerKind::lstm: return CellKind::lstm;
        case LayerKind::gru: return CellKind::gru;
        default: return l.cell;
    }
}

void check_positive(int v, const char* what) {
    if (v < 1) throw ConfigError(std::string("layer field '") + what + "' must be a positive integer");
}

void validate_layer(const LayerSpec& l) {
    switch (l.kind) {
        case LayerKind::dense: check_positive(l.units, "units"); break;
        case LayerKind::conv1d:
            check_positive(l.kernels, "kernels");
            check_positive(l.kernel_size, "kernel_size");
            check_positive(l.stride, "stride");
            if (l.padding < 0) throw ConfigError("layer field 'padding' must be non-negative");
            break;
        case LayerKind::maxpool1d:
            check_positive(l.pool, "pool");
            check_positive(l.stride, "stride");
            break;
        case LayerKind::rnn:
        case LayerKind::lstm:
        case LayerKind::gru:
        case LayerKind::bidirectional: check_positive(l.units, "units"); break;
        case LayerKind::flatten: break;
    }
}

// ---------------------------------------------------------------------------
// Batched layers. A batch of activations is a B x (length*channels) row-major matrix.

struct Layer {
    Shape in, out;
    std::size_t offset{0}, count{0};
    virtual ~Layer() = default;
    virtual void forward(const RowMatrix& x, RowMatrix& y, const double* theta) = 0;
    // Accumulates into grad; dx may be null for the first layer.
    virtual void backward(const RowMatrix& dy, RowMatrix* dx, const double* theta, double* grad) = 0;
    virtual bool saw_tie() const { return false; }
};

struct DenseLayer final : Layer {
    Activation f;
    RowMatrix x_, y_;
    explicit DenseLayer(Activation a) : f(a) {}

    void forward(const RowMatrix& x, RowMatrix& y, const double* theta) override {
        const ConstMap w(theta + offset, in.size(), out.channels);
        const Eigen::Map<const Eigen::RowVectorXd> b(theta + offset + w.size(), out.channels);
        y.noalias() = x * w;
        y.rowwise() += b;
        activate(y, f);
        x_ = x;
        y_ = y;
    }
    void backward(const RowMatrix& dy, RowMatrix* dx, const double* theta, double* grad) override {
        const ConstMap w(theta + offset, in.size(), out.channels);
        Map gw(grad + offset, in.size(), out.channels);
        Eigen::Map<Eigen::RowVectorXd> gb(grad + offset + w.size(), out.channels);
        RowMatrix dz = dy;
        activation_backward(dz, y_, f);
        gw.noalias() += x_.transpose() * dz;
        gb += dz.colwise().sum();
        if (dx) dx->noalias() = dz * w.transpose();
    }
};

struct FlattenLayer final : Layer {
    void forward(const RowMatrix& x, RowMatrix& y, const double*) override { y = x; }
    void backward(const RowMatrix& dy, RowMatrix* dx, const double*, double*) override {
        if (dx) *dx = dy;
    }
};

struct ConvLayer final : Layer {
    int k, stride, padding;
    Activation f;
    RowMatrix col_, y_;
    ConvLayer(int ks, int s, int p, Activation a) : k(ks), stride(s), padding(p), f(a) {}

    void forward(const RowMatrix& x, RowMatrix& y, const double* theta) override {
        const Eigen::Index batch = x.rows();
        const int c = in.channels, m = out.length, nk = out.channels;
        col_.setZero(batch * m, k * c);
        for (Eigen::Index b = 0; b < batch; ++b)
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < k; ++j) {
                    const int pos = i * stride - padding + j;
                    if (pos < 0 || pos >= in.length) continue;
                    col_.row(b * m + i).segment(j * c, c) = x.row(b).segment(pos * c, c);
                }
        const ConstMap w(theta + offset, k * c, nk);
        const Eigen::Map<const Eigen::RowVectorXd> bias(theta + offset + w.size(), nk);
        y.resize(batch, m * nk);
        Map z(y.data(), batch * m, nk);
        z.noalias() = col_ * w;
        z.rowwise() += bias;
        activate(z, f);
        y_ = y;
    }
    void backward(const RowMatrix& dy, RowMatrix* dx, const double* theta, double* grad) override {
        const Eigen::Index batch = dy.rows();
        const int c = in.channels, m = out.length, nk = out.channels;
        const ConstMap w(theta + offset, k * c, nk);
        Map gw(grad + offset, k * c, nk);
        Eigen::Map<Eigen::RowVectorXd> gb(grad + offset + w.size(), nk);
        RowMatrix dz = ConstMap(dy.data(), batch * m, nk);
        activation_backward(dz, ConstMap(y_.data(), batch * m, nk), f);
        gw.noalias() += col_.transpose() * dz;
        gb += dz.colwise().sum();
        if (!dx) return;
        const RowMatrix dcol = dz * w.transpose();
        dx->setZero(batch, in.size());
        for (Eigen::Index b = 0; b < batch; ++b)
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < k; ++j) {
                    const int pos = i * stride - padding + j;
                    if (pos < 0 || pos >= in.length) continue;
                    dx->row(b).segment(pos * c, c) += dcol.row(b * m + i).segment(j * c, c);
                }
    }
};

struct PoolLayer final : Layer {
    int pool, stride;
    std::vector<int> arg_;
    bool tie_{false};
    static constexpr double tie_tolerance = 1e-7;
    PoolLayer(int p, int s) : pool(p), stride(s) {}

    void forward(const RowMatrix& x, RowMatrix& y, const double*) override {
        const Eigen::Index batch = x.rows();
        const int c = in.channels, m = out.length;
        y.resize(batch, m * c);
        arg_.assign(static_cast<std::size_t>(batch * m * c), 0);
        tie_ = false;
        for (Eigen::Index b = 0; b < batch; ++b)
            for (int i = 0; i < m; ++i)
                for (int ch = 0; ch < c; ++ch) {
                    int best = i * stride;
                    double v = x(b, best * c + ch);
                    for (int j = 1; j < pool; ++j) {
                        const int pos = i * stride + j;
                        const double u = x(b, pos * c + ch);
                        if (u > v) {
                            tie_ = tie_ || u - v < tie_tolerance;
                            v = u;
                            best = pos;
                        } else if (v - u < tie_tolerance) {
                            tie_ = true;
                        }
                    }
                    y(b, i * c + ch) = v;
                    arg_[static_cast<std::size_t>((b * m + i) * c + ch)] = best;
                }
    }
    void backward(const RowMatrix& dy, RowMatrix* dx, const double*, double*) override {
        if (!dx) return;
        const Eigen::Index batch = dy.rows();
        const int c = in.channels, m = out.length;
        dx->setZero(batch, in.size());
        for (Eigen::Index b = 0; b < batch; ++b)
            for (int i = 0; i < m; ++i)
                for (int ch = 0; ch < c; ++ch) {
                    const int pos = arg_[static_cast<std::size_t>((b * m + i) * c + ch)];
                    (*dx)(b, pos * c + ch) += dy(b, i * c + ch);
                }
    }
    bool saw_tie() const override { return tie_; }
};

// One recurrent direction over a batch. Parameters: wx (m x gk), wh (k x gk), b (gk), and for
// the GRU a second bias bh (gk). States are cached for backpropagation through time.
class RecurrentCore {
public:
    RecurrentCore(CellKind kind, int inputs, int units, int length, bool reverse)
        : kind_(kind), m_(inputs), k_(units), len_(length), g_(gate_count(kind)), reverse_(reverse) {}

    std::size_t count() const { return cell_parameter_count(kind_, m_, k_); }

    // Returns all hidden states as B x (length*k), indexed by original time.
    const RowMatrix& forward(const RowMatrix& x, const double* theta) {
        const Eigen::Index batch = x.rows();
        const int gk = g_ * k_;
        const ConstMap wx(theta, m_, gk);
        const ConstMap wh(theta + wx.size(), k_, gk);
        Eigen::RowVectorXd bias = Eigen::Map<const Eigen::RowVectorXd>(theta + wx.size() + wh.size(), gk);
        if (kind_ == CellKind::gru) bias += Eigen::Map<const Eigen::RowVectorXd>(theta + wx.size() + wh.size() + gk, gk);

        x_ = x;
        const ConstMap x2(x.data(), batch * len_, m_);
        xp_.resize(batch * len_, gk);
        xp_.noalias() = x2 * wx;
        xp_.rowwise() += bias;

        h_.setZero(batch, static_cast<Eigen::Index>(len_) * k_);
        gates_.resize(batch, static_cast<Eigen::Index>(len_) * gk);
        if (kind_ == CellKind::lstm) c_.setZero(batch, static_cast<Eigen::Index>(len_) * k_);

        RowMatrix h_prev = RowMatrix::Zero(batch, k_), c_prev = RowMatrix::Zero(batch, k_);
        RowMatrix a(batch, gk), rh(batch, k_);
        for (int s = 0; s < len_; ++s) {
            const int t = reverse_ ? len_ - 1 - s : s;
            const ConstStridedMap xt(xp_.data() + static_cast<Eigen::Index>(t) * gk, batch, gk,
                                     Eigen::OuterStride<>(static_cast<Eigen::Index>(len_) * gk));
            auto gt = gates_.middleCols(static_cast<Eigen::Index>(t) * gk, gk);
            auto ht = h_.middleCols(static_cast<Eigen::Index>(t) * k_, k_);
            switch (kind_) {
                case CellKind::rnn:
                    a.noalias() = xt + h_prev * wh;
                    gt = a.array().tanh();
                    ht = gt;
                    break;
                case CellKind::lstm: {
                    a.noalias() = xt + h_prev * wh;
                    for (int q = 0; q < 4; ++q) {
                        auto blk = a.middleCols(q * k_, k_);
                        if (q == 2)
                            gt.middleCols(q * k_, k_) = blk.array().tanh();
                        else
                            gt.middleCols(q * k_, k_) = blk.unaryExpr([](double v) { return sigmoid(v); });
                    }
                    auto ct = c_.middleCols(static_cast<Eigen::Index>(t) * k_, k_);
                    ct = gt.middleCols(0, k_).cwiseProduct(c_prev) +
                         gt.middleCols(k_, k_).cwiseProduct(gt.middleCols(2 * k_, k_));
                    ht = gt.middleCols(3 * k_, k_).cwiseProduct(ct.array().tanh().matrix());
                    c_prev = ct;
                    break;
                }
                case CellKind::gru: {
                    a.leftCols(2 * k_).noalias() = xt.leftCols(2 * k_) + h_prev * wh.leftCols(2 * k_);
                    gt.leftCols(2 * k_) = a.leftCols(2 * k_).unaryExpr([](double v) { return sigmoid(v); });
                    rh = gt.middleCols(k_, k_).cwiseProduct(h_prev);
                    a.rightCols(k_).noalias() = xt.rightCols(k_) + rh * wh.rightCols(k_);
                    gt.rightCols(k_) = a.rightCols(k_).array().tanh();
                    const auto z = gt.leftCols(k_).array();
                    ht = ((1.0 - z) * h_prev.array() + z * gt.rightCols(k_).array()).matrix();
                    break;
                }
            }
            h_prev = ht;
        }
        return h_;
    }

    // dh: B x (length*k) gradient on every cached state. Returns dx (B x length*m).
    void backward(const RowMatrix& dh, RowMatrix* dx, const double* theta, double* grad) {
        const Eigen::Index batch = dh.rows();
        const int gk = g_ * k_;
        const ConstMap wx(theta, m_, gk);
        const ConstMap wh(theta + wx.size(), k_, gk);
        Map gwx(grad, m_, gk);
        Map gwh(grad + wx.size(), k_, gk);
        Eigen::Map<Eigen::RowVectorXd> gb(grad + wx.size() + wh.size(), gk);

        RowMatrix dxp(batch * len_, gk);
        RowMatrix dh_next = RowMatrix::Zero(batch, k_), dc_next = RowMatrix::Zero(batch, k_);
        RowMatrix da(batch, gk), dcur(batch, k_), zeros = RowMatrix::Zero(batch, k_), drh(batch, k_);
        for (int s = len_ - 1; s >= 0; --s) {
            const int t = reverse_ ? len_ - 1 - s : s;
            const bool first = s == 0;
            const int tp = reverse_ ? t + 1 : t - 1;
            const auto gt = gates_.middleCols(static_cast<Eigen::Index>(t) * gk, gk);
            const auto ht = h_.middleCols(static_cast<Eigen::Index>(t) * k_, k_);
            const RowMatrix h_prev = first ? zeros : RowMatrix(h_.middleCols(static_cast<Eigen::Index>(tp) * k_, k_));
            dcur = dh.middleCols(static_cast<Eigen::Index>(t) * k_, k_) + dh_next;
            switch (kind_) {
                case CellKind::rnn:
                    da = dcur.array() * (1.0 - ht.array().square());
                    dh_next.noalias() = da * wh.transpose();
                    break;
                case CellKind::lstm: {
                    const auto ct = c_.middleCols(static_cast<Eigen::Index>(t) * k_, k_);
                    const RowMatrix c_prev =
                        first ? zeros : RowMatrix(c_.middleCols(static_cast<Eigen::Index>(tp) * k_, k_));
                    const auto f = gt.middleCols(0, k_).array();
                    const auto i = gt.middleCols(k_, k_).array();
                    const auto g = gt.middleCols(2 * k_, k_).array();
                    const auto o = gt.middleCols(3 * k_, k_).array();
                    const Eigen::ArrayXXd tc = ct.array().tanh();
                    const Eigen::ArrayXXd dc = dc_next.array() + dcur.array() * o * (1.0 - tc.square());
                    da.middleCols(0, k_) = (dc * c_prev.array() * f * (1.0 - f)).matrix();
                    da.middleCols(k_, k_) = (dc * g * i * (1.0 - i)).matrix();
                    da.middleCols(2 * k_, k_) = (dc * i * (1.0 - g.square())).matrix();
                    da.middleCols(3 * k_, k_) = (dcur.array() * tc * o * (1.0 - o)).matrix();
                    dc_next = (dc * f).matrix();
                    dh_next.noalias() = da * wh.transpose();
                    break;
                }
                case CellKind::gru: {
                    const auto z = gt.leftCols(k_).array();
                    const auto r = gt.middleCols(k_, k_).array();
                    const auto g = gt.rightCols(k_).array();
                    const Eigen::ArrayXXd dz = dcur.array() * (g - h_prev.array());
                    const Eigen::ArrayXXd dg = dcur.array() * z;
                    da.rightCols(k_) = (dg * (1.0 - g.square())).matrix();
                    drh.noalias() = da.rightCols(k_) * wh.rightCols(k_).transpose();
                    const RowMatrix rh = (r * h_prev.array()).matrix();
                    gwh.rightCols(k_).noalias() += rh.transpose() * da.rightCols(k_);
                    da.leftCols(k_) = (dz * z * (1.0 - z)).matrix();
                    da.middleCols(k_, k_) = (drh.array() * h_prev.array() * r * (1.0 - r)).matrix();
                    dh_next = (dcur.array() * (1.0 - z) + drh.array() * r).matrix();
                    dh_next.noalias() += da.leftCols(2 * k_) * wh.leftCols(2 * k_).transpose();
                    break;
                }
            }
            if (kind_ == CellKind::gru) {
                if (!first) gwh.leftCols(2 * k_).noalias() += h_prev.transpose() * da.leftCols(2 * k_);
            } else if (!first) {
                gwh.noalias() += h_prev.transpose() * da;
            }
            StridedMap(dxp.data() + static_cast<Eigen::Index>(t) * gk, batch, gk,
                       Eigen::OuterStride<>(static_cast<Eigen::Index>(len_) * gk)) = da;
        }
        const ConstMap x2(x_.data(), batch * len_, m_);
        gwx.noalias() += x2.transpose() * dxp;
        const Eigen::RowVectorXd bsum = dxp.colwise().sum();
        gb += bsum;
        if (kind_ == CellKind::gru) Eigen::Map<Eigen::RowVectorXd>(grad + wx.size() + wh.size() + gk, gk) += bsum;
        if (dx) {
            dx->resize(batch, static_cast<Eigen::Index>(len_) * m_);
            Map(dx->data(), batch * len_, m_).noalias() = dxp * wx.transpose();
        }
    }

    int units() const { return k_; }
    int length() const { return len_; }

private:
    CellKind kind_;
    int m_, k_, len_, g_;
    bool reverse_;
    RowMatrix x_, xp_, h_, gates_, c_;
};

struct RecurrentLayer final : Layer {
    RecurrentCore core;
    bool sequences;
    RecurrentLayer(CellKind kind, Shape input, int units, bool return_sequences)
        : core(kind, input.channels, units, input.length, false), sequences(return_sequences) {}

    void forward(const RowMatrix& x, RowMatrix& y, const double* theta) override {
        const RowMatrix& h = core.forward(x, theta + offset);
        const int k = core.units();
        y = sequences ? h : RowMatrix(h.rightCols(k));
    }
    void backward(const RowMatrix& dy, RowMatrix* dx, const double* theta, double* grad) override {
        const int k = core.units();
        RowMatrix dh;
        if (sequences) {
            dh = dy;
        } else {
            dh.setZero(dy.rows(), static_cast<Eigen::Index>(core.length()) * k);
            dh.rightCols(k) = dy;
        }
        core.backward(dh, dx, theta + offset, grad + offset);
    }
};

struct BidirectionalLayer final : Layer {
    RecurrentCore fwd, bwd;
    bool sequences;
    BidirectionalLayer(CellKind kind, Shape input, int units, bool return_sequences)
        : fwd(kind, input.channels, units, input.length, false),
          bwd(kind, input.channels, units, input.length, true),
          sequences(return_sequences) {}

    void forward(const RowMatrix& x, RowMatrix& y, const double* theta) override {
        const RowMatrix& hf = fwd.forward(x, theta + offset);
        const RowMatrix& hb = bwd.forward(x, theta + offset + fwd.count());
        const int k = fwd.units(), len = fwd.length();
        if (sequences) {
            y.resize(x.rows(), static_cast<Eigen::Index>(len) * 2 * k);
            for (int t = 0; t < len; ++t) {
                y.middleCols(static_cast<Eigen::Index>(t) * 2 * k, k) = hf.middleCols(static_cast<Eigen::Index>(t) * k, k);
                y.middleCols(static_cast<Eigen::Index>(t) * 2 * k + k, k) =
                    hb.middleCols(static_cast<Eigen::Index>(t) * k, k);
            }
        } else {
            y.resize(x.rows(), 2 * k);
            y.leftCols(k) = hf.rightCols(k);
            y.rightCols(k) = hb.leftCols(k);
        }
    }
    void backward(const RowMatrix& dy, RowMatrix* dx, const double* theta, double* grad) override {
        const int k = fwd.units(), len = fwd.length();
        const Eigen::Index batch = dy.rows();
        RowMatrix dhf = RowMatrix::Zero(batch, static_cast<Eigen::Index>(len) * k), dhb = dhf;
        if (sequences) {
            for (int t = 0; t < len; ++t) {
                dhf.middleCols(static_cast<Eigen::Index>(t) * k, k) = dy.middleCols(static_cast<Eigen::Index>(t) * 2 * k, k);
                dhb.middleCols(static_cast<Eigen::Index>(t) * k, k) =
                    dy.middleCols(static_cast<Eigen::Index>(t) * 2 * k + k, k);
            }
        } else {
            dhf.rightCols(k) = dy.leftCols(k);
            dhb.leftCols(k) = dy.rightCols(k);
        }
        RowMatrix dxf, dxb;
        fwd.backward(dhf, dx ? &dxf : nullptr, theta + offset, grad + offset);
        bwd.backward(dhb, dx ? &dxb : nullptr, theta + offset + fwd.count(), grad + offset + fwd.count());
        if (dx) *dx = dxf + dxb;
    }
};

class Network {
public:
    explicit Network(const NetSpec& spec) {
        const auto shapes = spec.shapes();
        Shape in{spec.input_length, spec.input_channels};
        std::size_t offset = 0;
        for (std::size_t i = 0; i < spec.layers.size(); ++i) {
            const LayerSpec& l = spec.layers[i];
            std::unique_ptr<Layer> layer;
            switch (l.kind) {
                case LayerKind::dense: layer = std::make_unique<DenseLayer>(l.activation); break;
                case LayerKind::flatten: layer = std::make_unique<FlattenLayer>(); break;
                case LayerKind::conv1d:
                    layer = std::make_unique<ConvLayer>(l.kernel_size, l.stride, l.padding, l.activation);
                    break;
                case LayerKind::maxpool1d: layer = std::make_unique<PoolLayer>(l.pool, l.stride); break;
                case LayerKind::rnn:
                case LayerKind::lstm:
                case LayerKind::gru:
                    layer = std::make_unique<RecurrentLayer>(cell_of(l), in, l.units, l.return_sequences);
                    break;
                case LayerKind::bidirectional:
                    layer = std::make_unique<BidirectionalLayer>(l.cell, in, l.units, l.return_sequences);
                    break;
            }
            layer->in = in;
            layer->out = shapes[i];
            layer->offset = offset;
            layer->count = layer_parameter_count(l, in);
            offset += layer->count;
            in = shapes[i];
            layers_.push_back(std::move(layer));
        }
        total_ = offset;
    }

    std::size_t total() const { return total_; }

    const RowMatrix& forward(const RowMatrix& x, const double* theta) {
        acts_.resize(layers_.size() + 1);
        acts_[0] = x;
        for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->forward(acts_[i], acts_[i + 1], theta);
        return acts_.back();
    }

    void backward(const RowMatrix& dy, const double* theta, double* grad) {
        RowMatrix d = dy, dx;
        for (std::size_t i = layers_.size(); i-- > 0;) {
            layers_[i]->backward(d, i == 0 ? nullptr : &dx, theta, grad);
            if (i > 0) std::swap(d, dx);
        }
    }

    bool saw_tie() const {
        return std::any_of(layers_.begin(), layers_.end(), [](const auto& l) { return l->saw_tie(); });
    }

private:
    std::vector<std::unique_ptr<Layer>> layers_;
    std::vector<RowMatrix> acts_;
    std::size_t total_{0};
};

void check_model(const NetModel& model) {
    const std::size_t n = count_parameters(model.spec);
    if (static_cast<std::size_t>(model.parameters.size()) != n)
        throw ConfigError("model has " + std::to_string(model.parameters.size()) + " parameters, spec needs " +
                          std::to_string(n));
}

RowMatrix to_matrix(const data::Dataset& d, const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end,
                    Eigen::VectorXd& y) {
    const auto t = static_cast<Eigen::Index>(d.window_length);
    RowMatrix x(static_cast<Eigen::Index>(end - begin), t);
    y.resize(static_cast<Eigen::Index>(end - begin));
    for (std::size_t r = begin; r < end; ++r) {
        const auto& s = d.samples[idx[r]];
        x.row(static_cast<Eigen::Index>(r - begin)) = Eigen::Map<const Eigen::RowVectorXd>(s.input.data(), t);
        y(static_cast<Eigen::Index>(r - begin)) = s.label;
    }
    return x;
}

// Mean squared and absolute error over a dataset, evaluated in chunks.
std::pair<double, double> evaluate(Network& net, const NetModel& model, const data::Dataset& d) {
    std::vector<std::size_t> idx(d.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    double se = 0.0, ae = 0.0;
    constexpr std::size_t chunk = 512;
    Eigen::VectorXd y;
    for (std::size_t b = 0; b < d.size(); b += chunk) {
        const std::size_t e = std::min(d.size(), b + chunk);
        const RowMatrix x = to_matrix(d, idx, b, e, y);
        const Eigen::VectorXd r = net.forward(x, model.parameters.data()).col(0) - y;
        se += r.squaredNorm();
        ae += r.cwiseAbs().sum();
    }
    const auto n = static_cast<double>(d.size());
    return {se / n, ae / n};
}

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(Activation a) {
    switch (a) {
        case Activation::tanh: return "tanh";
        case Activation::sigmoid: return "sigmoid";
        case Activation::relu: return "relu";
        case Activation::linear: return "linear";
    }
    return "linear";
}

std::string to_string(LayerKind k) {
    switch (k) {
        case LayerKind::dense: return "dense";
        case LayerKind::conv1d: return "conv1d";
        case LayerKind::maxpool1d: return "maxpool1d";
        case LayerKind::rnn: return "rnn";
        case LayerKind::lstm: return "lstm";
        case LayerKind::gru: return "gru";
        case LayerKind::bidirectional: return "bidirectional";
        case LayerKind::flatten: return "flatten";
    }
    return "dense";
}

std::string to_string(CellKind c) {
    switch (c) {
        case CellKind::rnn: return "rnn";
        case CellKind::lstm: return "lstm";
        case CellKind::gru: return "gru";
    }
    return "rnn";
}

Activation parse_activation(const std::string& s) {
    for (auto a : {Activation::tanh, Activation::sigmoid, Activation::relu, Activation::linear})
        if (to_string(a) == s) return a;
    throw ConfigError("unknown activation '" + s + "'");
}

LayerKind parse_layer_kind(const std::string& s) {
    for (auto k : {LayerKind::dense, LayerKind::conv1d, LayerKind::maxpool1d, LayerKind::rnn, LayerKind::lstm,
                   LayerKind::gru, LayerKind::bidirectional, LayerKind::flatten})
        if (to_string(k) == s) return k;
    throw ConfigError("unknown layer kind '" + s + "'");
}

CellKind parse_cell_kind(const std::string& s) {
    for (auto c : {CellKind::rnn, CellKind::lstm, CellKind::gru})
        if (to_string(c) == s) return c;
    throw ConfigError("unknown cell kind '" + s + "'");
}

LayerSpec LayerSpec::dense(int units, Activation a) {
    LayerSpec l;
    l.kind = LayerKind::dense;
    l.units = units;
    l.activation = a;
    return l;
}

LayerSpec LayerSpec::conv1d(int kernels, int kernel_size, Activation a, int stride, int padding) {
    LayerSpec l;
    l.kind = LayerKind::conv1d;
    l.kernels = kernels;
    l.kernel_size = kernel_size;
    l.activation = a;
    l.stride = stride;
    l.padding = padding;
    return l;
}

LayerSpec LayerSpec::maxpool1d(int pool, int stride) {
    LayerSpec l;
    l.kind = LayerKind::maxpool1d;
    l.pool = pool;
    l.stride = stride;
    return l;
}

LayerSpec LayerSpec::recurrent(CellKind cell, int units, bool return_sequences) {
    LayerSpec l;
    l.kind = cell == CellKind::rnn ? LayerKind::rnn : cell == CellKind::lstm ? LayerKind::lstm : LayerKind::gru;
    l.cell = cell;
    l.units = units;
    l.activation = Activation::tanh;
    l.return_sequences = return_sequences;
    return l;
}

LayerSpec LayerSpec::bidirectional(CellKind cell, int units, bool return_sequences) {
    LayerSpec l = recurrent(cell, units, return_sequences);
    l.kind = LayerKind::bidirectional;
    return l;
}

LayerSpec LayerSpec::flatten() {
    LayerSpec l;
    l.kind = LayerKind::flatten;
    return l;
}

void NetSpec::validate() const { (void)shapes(); }

std::vector<Shape> NetSpec::shapes() const {
    if (input_length < 1 || input_channels < 1) throw ConfigError("input_length and input_channels must be positive");
    if (layers.empty()) throw ConfigError("network '" + name + "' has no layers");
    std::vector<Shape> out;
    Shape s{input_length, input_channels};
    for (const auto& l : layers) {
        validate_layer(l);
        s = output_shape(l, s);
        if (s.length < 1) throw ConfigError("layer " + to_string(l.kind) + " yields an empty output");
        out.push_back(s);
    }
    const LayerSpec& head = layers.back();
    if (head.kind != LayerKind::dense || head.units != 1 || head.activation != Activation::linear)
        throw ConfigError("network '" + name + "' must end in dense(1, linear)");
    return out;
}

std::size_t layer_parameter_count(const LayerSpec& l, Shape in) {
    switch (l.kind) {
        case LayerKind::dense:
            return static_cast<std::size_t>(in.size()) * static_cast<std::size_t>(l.units) +
                   static_cast<std::size_t>(l.units);
        case LayerKind::conv1d:
            return static_cast<std::size_t>(l.kernel_size) * static_cast<std::size_t>(in.channels) *
                       static_cast<std::size_t>(l.kernels) +
                   static_cast<std::size_t>(l.kernels);
        case LayerKind::rnn:
        case LayerKind::lstm:
        case LayerKind::gru: return cell_parameter_count(cell_of(l), in.channels, l.units);
        case LayerKind::bidirectional: return 2 * cell_parameter_count(l.cell, in.channels, l.units);
        case LayerKind::maxpool1d:
        case LayerKind::flatten: return 0;
    }
    return 0;
}

std::size_t count_parameters(const NetSpec& spec) {
    const auto shapes = spec.shapes();
    Shape in{spec.input_length, spec.input_channels};
    std::size_t n = 0;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        n += layer_parameter_count(spec.layers[i], in);
        in = shapes[i];
    }
    return n;
}

const std::vector<std::string>& architecture_ids() {
    static const std::vector<std::string> ids{"1D CNN", "FFNN",   "LSTM",  "GRU",   "RNN",   "CLSTM", "CGRU",
                                              "CRNN",   "CBLSTM", "CBGRU", "CBRNN", "BLSTM", "BGRU",  "BRNN"};
    return ids;
}

NetSpec architecture(const std::string& id, int input_length) {
    std::string key = lower(id);
    key.erase(std::remove_if(key.begin(), key.end(), [](char c) { return c == ' ' || c == '-' || c == '_'; }),
              key.end());
    if (key == "1dcnn") key = "cnn1d";

    NetSpec spec;
    spec.input_length = input_length;
    auto& L = spec.layers;
    const auto head = [&] {
        L.push_back(LayerSpec::flatten());
        L.push_back(LayerSpec::dense(256, Activation::relu));
        L.push_back(LayerSpec::dense(1, Activation::linear));
    };
    const auto two_recurrent = [&](CellKind c, bool bi, int k1, int k2) {
        L.push_back(bi ? LayerSpec::bidirectional(c, k1) : LayerSpec::recurrent(c, k1));
        L.push_back(bi ? LayerSpec::bidirectional(c, k2) : LayerSpec::recurrent(c, k2));
        head();
    };
    const auto conv_recurrent = [&](CellKind c, bool bi, int kernels, int k) {
        L.push_back(LayerSpec::conv1d(kernels, 16, Activation::relu));
        L.push_back(bi ? LayerSpec::bidirectional(c, k) : LayerSpec::recurrent(c, k));
        head();
    };

    if (key == "cnn1d") {
        spec.name = "1D CNN";
        L.push_back(LayerSpec::conv1d(235, 16, Activation::relu));
        L.push_back(LayerSpec::conv1d(125, 7, Activation::relu));
        L.push_back(LayerSpec::maxpool1d(2, 2));
        head();
    } else if (key == "ffnn") {
        spec.name = "FFNN";
        L.push_back(LayerSpec::flatten());
        L.push_back(LayerSpec::dense(754, Activation::relu));
        L.push_back(LayerSpec::dense(646, Activation::relu));
        L.push_back(LayerSpec::dense(1, Activation::linear));
    } else if (key == "lstm") {
        spec.name = "LSTM";
        two_recurrent(CellKind::lstm, false, 15, 49);
    } else if (key == "gru") {
        spec.name = "GRU";
        two_recurrent(CellKind::gru, false, 60, 50);
    } else if (key == "rnn") {
        spec.name = "RNN";
        two_recurrent(CellKind::rnn, false, 65, 50);
    } else if (key == "clstm") {
        spec.name = "CLSTM";
        conv_recurrent(CellKind::lstm, false, 28, 71);
    } else if (key == "cgru") {
        spec.name = "CGRU";
        conv_recurrent(CellKind::gru, false, 55, 73);
    } else if (key == "crnn") {
        spec.name = "CRNN";
        conv_recurrent(CellKind::rnn, false, 243, 73);
    } else if (key == "cblstm") {
        spec.name = "CBLSTM";
        conv_recurrent(CellKind::lstm, true, 109, 39);
    } else if (key == "cbgru") {
        spec.name = "CBGRU";
        conv_recurrent(CellKind::gru, true, 55, 37);
    } else if (key == "cbrnn") {
        spec.name = "CBRNN";
        conv_recurrent(CellKind::rnn, true, 297, 36);
    } else if (key == "blstm") {
        spec.name = "BLSTM";
        two_recurrent(CellKind::lstm, true, 6, 24);
    } else if (key == "bgru") {
        spec.name = "BGRU";
        two_recurrent(CellKind::gru, true, 14, 25);
    } else if (key == "brnn") {
        spec.name = "BRNN";
        two_recurrent(CellKind::rnn, true, 37, 24);
    } else {
        throw ConfigError("unknown architecture '" + id + "'");
    }
    spec.validate();
    return spec;
}

std::vector<ParameterBlock> parameter_layout(const NetSpec& spec) {
    const auto shapes = spec.shapes();
    std::vector<ParameterBlock> out;
    Shape in{spec.input_length, spec.input_channels};
    std::size_t offset = 0;
    const auto add = [&](std::size_t layer, std::string name, std::size_t rows, std::size_t cols) {
        out.push_back({layer, std::move(name), rows, cols, offset});
        offset += rows * cols;
    };
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        const auto m = static_cast<std::size_t>(in.channels);
        switch (l.kind) {
            case LayerKind::dense:
                add(i, "w", static_cast<std::size_t>(in.size()), static_cast<std::size_t>(l.units));
                add(i, "b", 1, static_cast<std::size_t>(l.units));
                break;
            case LayerKind::conv1d:
                add(i, "w", static_cast<std::size_t>(l.kernel_size) * m, static_cast<std::size_t>(l.kernels));
                add(i, "b", 1, static_cast<std::size_t>(l.kernels));
                break;
            case LayerKind::rnn:
            case LayerKind::lstm:
            case LayerKind::gru:
            case LayerKind::bidirectional: {
                const CellKind c = cell_of(l);
                const auto k = static_cast<std::size_t>(l.units);
                const auto gk = static_cast<std::size_t>(gate_count(c)) * k;
                const int dirs = l.kind == LayerKind::bidirectional ? 2 : 1;
                for (int d = 0; d < dirs; ++d) {
                    const std::string p = dirs == 2 ? (d == 0 ? "fwd_" : "bwd_") : "";
                    add(i, p + "wx", m, gk);
                    add(i, p + "wh", k, gk);
                    add(i, p + (c == CellKind::gru ? "bx" : "b"), 1, gk);
                    if (c == CellKind::gru) add(i, p + "bh", 1, gk);
                }
                break;
            }
            case LayerKind::maxpool1d:
            case LayerKind::flatten: break;
        }
        in = shapes[i];
    }
    return out;
}

NetModel build_model(const NetSpec& spec, std::uint64_t seed) {
    NetModel model;
    model.spec = spec;
    model.rng_seed = seed;
    model.parameters = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(count_parameters(spec)));
    std::mt19937_64 rng(seed);
    const auto shapes = spec.shapes();
    const auto layout = parameter_layout(spec);
    for (const auto& block : layout) {
        const bool bias = block.name.back() == 'b' || block.name.ends_with("bx") || block.name.ends_with("bh");
        if (bias) continue;
        const LayerSpec& l = spec.layers[block.layer];
        double fan_in = static_cast<double>(block.rows), fan_out = static_cast<double>(block.cols);
        if (l.kind == LayerKind::conv1d) fan_out = static_cast<double>(l.kernel_size * l.kernels);
        const double limit = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> u(-limit, limit);
        for (std::size_t j = 0; j < block.rows * block.cols; ++j)
            model.parameters(static_cast<Eigen::Index>(block.offset + j)) = u(rng);
    }
    return model;
}

NetModel build_model(const std::string& architecture_id, std::uint64_t seed) {
    return build_model(architecture(architecture_id), seed);
}

double predict(const NetModel& model, std::span<const double> window) {
    RowMatrix x(1, static_cast<Eigen::Index>(window.size()));
    for (std::size_t i = 0; i < window.size(); ++i) x(0, static_cast<Eigen::Index>(i)) = window[i];
    return predict(model, x)(0);
}

Eigen::VectorXd predict(const NetModel& model, const RowMatrix& windows) {
    check_model(model);
    const auto expected = static_cast<Eigen::Index>(model.spec.input_length) * model.spec.input_channels;
    if (windows.cols() != expected)
        throw ConfigError("window length " + std::to_string(windows.cols()) + " does not match the model input " +
                          std::to_string(expected));
    Network net(model.spec);
    return net.forward(windows, model.parameters.data()).col(0);
}

// ---------------------------------------------------------------------------

namespace {

Eigen::RowVectorXd as_row(const Eigen::VectorXd& v) { return v.transpose(); }

RowMatrix single_step(CellKind kind, const Eigen::VectorXd& x, const Eigen::VectorXd& h_prev,
                      const Eigen::VectorXd* c_prev, const CellParams& p, Eigen::VectorXd* c_out) {
    const int k = p.units();
    const int gk = gate_count(kind) * k;
    if (p.kind != kind) throw ConfigError("cell parameters are for " + to_string(p.kind) + ", not " + to_string(kind));
    if (p.wx.rows() != x.size() || p.wx.cols() != gk || p.wh.cols() != gk || h_prev.size() != k || p.b.size() != gk ||
        (kind == CellKind::gru && p.bh.size() != gk))
        throw ConfigError("cell step shape mismatch");
    const Eigen::RowVectorXd xr = as_row(x), hr = as_row(h_prev);
    Eigen::RowVectorXd xp = xr * p.wx + as_row(p.b);
    if (kind == CellKind::gru) xp += as_row(p.bh);
    Eigen::RowVectorXd h(k);
    switch (kind) {
        case CellKind::rnn: h = (xp + hr * p.wh).array().tanh(); break;
        case CellKind::lstm: {
            if (!c_prev || c_prev->size() != k) throw ConfigError("cell step shape mismatch");
            const Eigen::RowVectorXd a = xp + hr * p.wh;
            const Eigen::ArrayXd f = a.segment(0, k).unaryExpr([](double v) { return sigmoid(v); }).transpose();
            const Eigen::ArrayXd i = a.segment(k, k).unaryExpr([](double v) { return sigmoid(v); }).transpose();
            const Eigen::ArrayXd g = a.segment(2 * k, k).array().tanh().transpose();
            const Eigen::ArrayXd o = a.segment(3 * k, k).unaryExpr([](double v) { return sigmoid(v); }).transpose();
            const Eigen::ArrayXd c = f * c_prev->array() + i * g;
            *c_out = c.matrix();
            h = (o * c.tanh()).matrix().transpose();
            break;
        }
        case CellKind::gru: {
            const Eigen::RowVectorXd a = xp.head(2 * k) + hr * p.wh.leftCols(2 * k);
            const Eigen::ArrayXXd z = a.head(k).unaryExpr([](double v) { return sigmoid(v); });
            const Eigen::ArrayXXd r = a.tail(k).unaryExpr([](double v) { return sigmoid(v); });
            const Eigen::RowVectorXd rh = (r * hr.array()).matrix();
            const Eigen::ArrayXXd g = (xp.tail(k) + rh * p.wh.rightCols(k)).array().tanh();
            h = ((1.0 - z) * hr.array() + z * g).matrix();
            break;
        }
    }
    return h;
}

}  // namespace

CellParams CellParams::zeros(CellKind kind, int inputs, int units) {
    const int gk = gate_count(kind) * units;
    CellParams p;
    p.kind = kind;
    p.wx = RowMatrix::Zero(inputs, gk);
    p.wh = RowMatrix::Zero(units, gk);
    p.b = Eigen::VectorXd::Zero(gk);
    if (kind == CellKind::gru) p.bh = Eigen::VectorXd::Zero(gk);
    return p;
}

Eigen::VectorXd dense_forward(const Eigen::VectorXd& x, const RowMatrix& w, const Eigen::VectorXd& b, Activation f) {
    if (w.rows() != x.size() || w.cols() != b.size())
        throw ConfigError("dense shape mismatch: input " + std::to_string(x.size()) + ", weights " +
                          std::to_string(w.rows()) + "x" + std::to_string(w.cols()) + ", bias " +
                          std::to_string(b.size()));
    RowMatrix z = as_row(x) * w + as_row(b);
    activate(z, f);
    return z.transpose();
}

RowMatrix conv1d_forward(const RowMatrix& x, const RowMatrix& w, const Eigen::VectorXd& b, int stride, int padding,
                         Activation f) {
    const auto c = x.cols();
    if (c < 1 || w.rows() % c != 0 || w.cols() != b.size()) throw ConfigError("conv1d shape mismatch");
    LayerSpec l = LayerSpec::conv1d(static_cast<int>(w.cols()), static_cast<int>(w.rows() / c), f, stride, padding);
    validate_layer(l);
    const Shape in{static_cast<int>(x.rows()), static_cast<int>(c)};
    const Shape out = output_shape(l, in);
    ConvLayer layer(l.kernel_size, stride, padding, f);
    layer.in = in;
    layer.out = out;
    Eigen::VectorXd theta(w.size() + b.size());
    theta << Eigen::Map<const Eigen::VectorXd>(w.data(), w.size()), b;
    RowMatrix y;
    layer.forward(Eigen::Map<const RowMatrix>(x.data(), 1, x.size()), y, theta.data());
    return Eigen::Map<const RowMatrix>(y.data(), out.length, out.channels);
}

RowMatrix maxpool1d_forward(const RowMatrix& z, int pool, int stride) {
    const LayerSpec l = LayerSpec::maxpool1d(pool, stride);
    validate_layer(l);
    const Shape in{static_cast<int>(z.rows()), static_cast<int>(z.cols())};
    const Shape out = output_shape(l, in);
    PoolLayer layer(pool, stride);
    layer.in = in;
    layer.out = out;
    RowMatrix y;
    layer.forward(Eigen::Map<const RowMatrix>(z.data(), 1, z.size()), y, nullptr);
    return Eigen::Map<const RowMatrix>(y.data(), out.length, out.channels);
}

Eigen::VectorXd rnn_cell_step(const Eigen::VectorXd& x, const Eigen::VectorXd& h_prev, const CellParams& p) {
    return single_step(CellKind::rnn, x, h_prev, nullptr, p, nullptr).transpose();
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> lstm_cell_step(const Eigen::VectorXd& x, const Eigen::VectorXd& h_prev,
                                                           const Eigen::VectorXd& c_prev, const CellParams& p) {
    Eigen::VectorXd c;
    Eigen::VectorXd h = single_step(CellKind::lstm, x, h_prev, &c_prev, p, &c).transpose();
    return {std::move(h), std::move(c)};
}

Eigen::VectorXd gru_cell_step(const Eigen::VectorXd& x, const Eigen::VectorXd& h_prev, const CellParams& p) {
    return single_step(CellKind::gru, x, h_prev, nullptr, p, nullptr).transpose();
}

namespace {

Eigen::VectorXd flatten_cell(const CellParams& p) {
    Eigen::VectorXd theta(p.wx.size() + p.wh.size() + p.b.size() + p.bh.size());
    theta << Eigen::Map<const Eigen::VectorXd>(p.wx.data(), p.wx.size()),
        Eigen::Map<const Eigen::VectorXd>(p.wh.data(), p.wh.size()), p.b, p.bh;
    return theta;
}

void check_cell(const CellParams& p, Eigen::Index inputs) {
    const Eigen::Index gk = gate_count(p.kind) * p.wh.rows();
    if (p.wx.rows() != inputs || p.wx.cols() != gk || p.wh.cols() != gk || p.b.size() != gk ||
        p.bh.size() != (p.kind == CellKind::gru ? gk : 0))
        throw ConfigError("recurrent parameter shape mismatch");
}

}  // namespace

RowMatrix recurrent_forward(const RowMatrix& x, const CellParams& p, bool reverse) {
    check_cell(p, x.cols());
    RecurrentCore core(p.kind, static_cast<int>(x.cols()), p.units(), static_cast<int>(x.rows()), reverse);
    const Eigen::VectorXd theta = flatten_cell(p);
    const RowMatrix h = core.forward(Eigen::Map<const RowMatrix>(x.data(), 1, x.size()), theta.data());
    return Eigen::Map<const RowMatrix>(h.data(), x.rows(), p.units());
}

RowMatrix bidirectional_forward(const RowMatrix& x, const CellParams& fwd, const CellParams& bwd) {
    if (fwd.kind != bwd.kind || fwd.units() != bwd.units())
        throw ConfigError("bidirectional directions differ in cell kind or hidden length");
    const RowMatrix hf = recurrent_forward(x, fwd, false);
    const RowMatrix hb = recurrent_forward(x, bwd, true);
    RowMatrix y(x.rows(), 2 * fwd.units());
    y << hf, hb;
    return y;
}

// ---------------------------------------------------------------------------

void TrainOpts::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam betas must be in [0,1)");
    if (!(epsilon > 0.0)) throw ConfigError("adam epsilon must be positive");
    if (clip_norm < 0.0) throw ConfigError("clip_norm must be non-negative");
}

double loss_and_gradient(const NetModel& model, const RowMatrix& x, const Eigen::VectorXd& y,
                         Eigen::VectorXd& gradient) {
    check_model(model);
    Network net(model.spec);
    const RowMatrix& out = net.forward(x, model.parameters.data());
    const Eigen::VectorXd r = out.col(0) - y;
    const double n = static_cast<double>(y.size());
    gradient = Eigen::VectorXd::Zero(model.parameters.size());
    const RowMatrix dy = (2.0 / n) * r;
    net.backward(dy, model.parameters.data(), gradient.data());
    return r.squaredNorm() / n;
}

namespace {

double adam_update(NetModel& model, AdamState& state, Network& net, const RowMatrix& x, const Eigen::VectorXd& y,
                   const TrainOpts& opts, Eigen::VectorXd& grad, double* mae) {
    const RowMatrix& out = net.forward(x, model.parameters.data());
    const Eigen::VectorXd r = out.col(0) - y;
    const double n = static_cast<double>(y.size());
    const double mse = r.squaredNorm() / n;
    if (mae) *mae = r.cwiseAbs().sum() / n;
    if (!std::isfinite(mse)) return mse;
    grad.setZero(model.parameters.size());
    net.backward((2.0 / n) * r, model.parameters.data(), grad.data());
    if (opts.clip_norm > 0.0) {
        const double norm = grad.norm();
        if (norm > opts.clip_norm) grad *= opts.clip_norm / norm;
    }
    if (state.m.size() != model.parameters.size()) {
        state.m = Eigen::VectorXd::Zero(model.parameters.size());
        state.v = Eigen::VectorXd::Zero(model.parameters.size());
        state.step = 0;
    }
    ++state.step;
    state.m = opts.beta1 * state.m + (1.0 - opts.beta1) * grad;
    state.v = opts.beta2 * state.v + (1.0 - opts.beta2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(opts.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(opts.beta2, static_cast<double>(state.step));
    model.parameters.array() -=
        opts.learning_rate * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + opts.epsilon);
    return mse;
}

}  // namespace

double train_step(NetModel& model, AdamState& state, const RowMatrix& x, const Eigen::VectorXd& y,
                  const TrainOpts& opts) {
    opts.validate();
    check_model(model);
    Network net(model.spec);
    Eigen::VectorXd grad;
    const double mse = adam_update(model, state, net, x, y, opts, grad, nullptr);
    if (!std::isfinite(mse)) throw NumericalError("non-finite loss in training step");
    return mse;
}

TrainResult train(const NetModel& model, const data::Dataset& training, const data::Dataset* validation,
                  const TrainOpts& opts, const EpochCallback& on_epoch) {
    opts.validate();
    check_model(model);
    const auto expected = static_cast<std::size_t>(model.spec.input_length * model.spec.input_channels);
    if (training.empty()) throw ConfigError("training set is empty");
    if (training.window_length != expected)
        throw ConfigError("dataset window length " + std::to_string(training.window_length) +
                          " does not match the model input " + std::to_string(expected));
    if (validation && !validation->empty() && validation->window_length != expected)
        throw ConfigError("validation window length does not match the model input");

    const auto t0 = std::chrono::steady_clock::now();
    TrainResult result;
    result.model = model;
    NetModel& m = result.model;
    Network net(m.spec);
    AdamState state;
    Eigen::VectorXd grad, y;
    std::mt19937_64 rng(opts.seed);
    std::vector<std::size_t> order(training.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto bs = static_cast<std::size_t>(opts.batch_size);

    for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double se = 0.0, ae = 0.0;
        std::size_t batch_index = 0;
        for (std::size_t b = 0; b < order.size(); b += bs, ++batch_index) {
            const std::size_t e = std::min(order.size(), b + bs);
            const RowMatrix x = to_matrix(training, order, b, e, y);
            double mae = 0.0;
            const double mse = adam_update(m, state, net, x, y, opts, grad, &mae);
            if (!std::isfinite(mse))
                throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                                     std::to_string(batch_index));
            se += mse * static_cast<double>(e - b);
            ae += mae * static_cast<double>(e - b);
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_mse = se / static_cast<double>(order.size());
        rec.train_mae = ae / static_cast<double>(order.size());
        if (validation && !validation->empty()) {
            std::tie(rec.val_mse, rec.val_mae) = evaluate(net, m, *validation);
        } else {
            rec.val_mse = rec.val_mae = std::numeric_limits<double>::quiet_NaN();
        }
        result.history.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

GradientCheckResult gradient_check(const NetModel& model, const data::SlicedSample& sample, double epsilon,
                                   std::size_t max_checked, std::uint64_t seed, double floor) {
    if (!(epsilon > 0.0)) throw ConfigError("gradient check epsilon must be positive");
    check_model(model);
    RowMatrix x(1, static_cast<Eigen::Index>(sample.input.size()));
    for (std::size_t i = 0; i < sample.input.size(); ++i) x(0, static_cast<Eigen::Index>(i)) = sample.input[i];
    Eigen::VectorXd y(1);
    y(0) = sample.label;

    Network net(model.spec);
    Eigen::VectorXd theta = model.parameters;
    const Eigen::VectorXd r0 = net.forward(x, theta.data()).col(0) - y;
    GradientCheckResult out;
    out.maxpool_tie = net.saw_tie();
    Eigen::VectorXd analytic = Eigen::VectorXd::Zero(theta.size());
    net.backward(2.0 * r0, theta.data(), analytic.data());

    const auto loss = [&](Eigen::Index i, double delta) {
        const double keep = theta(i);
        theta(i) = keep + delta;
        const double r = net.forward(x, theta.data())(0, 0) - sample.label;
        out.maxpool_tie = out.maxpool_tie || net.saw_tie();
        theta(i) = keep;
        return r * r;
    };

    std::vector<Eigen::Index> idx(static_cast<std::size_t>(theta.size()));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    if (max_checked > 0 && max_checked < idx.size()) {
        std::mt19937_64 rng(seed);
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(max_checked);
        std::sort(idx.begin(), idx.end());
    }
    for (const Eigen::Index i : idx) {
        const double h = epsilon;
        const double numeric =
            (-loss(i, 2 * h) + 8.0 * loss(i, h) - 8.0 * loss(i, -h) + loss(i, -2 * h)) / (12.0 * h);
        const double a = analytic(i);
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
        if (rel > out.max_relative_error || out.checked == 0) {
            if (rel >= out.max_relative_error) out.worst_index = static_cast<std::size_t>(i);
            out.max_relative_error = std::max(out.max_relative_error, rel);
        }
        ++out.checked;
    }
    return out;
}

// ---------------------------------------------------------------------------

void LossHistory::write_csv(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path);
    if (!f) throw MissingInputError("cannot write " + path.string());
    f << "epoch,train_mse,val_mse,train_mae,val_mae\n" << std::setprecision(17);
    for (const auto& e : epochs)
        f << e.epoch << ',' << e.train_mse << ',' << e.val_mse << ',' << e.train_mae << ',' << e.val_mae << '\n';
}

LossHistory LossHistory::read_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw MissingInputError("loss history not found: " + path.string());
    LossHistory h;
    std::string line;
    std::getline(f, line);
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream s(line);
        EpochRecord e;
        std::string cell;
        std::vector<double> v;
        while (std::getline(s, cell, ',')) v.push_back(std::stod(cell));
        if (v.size() != 5) throw ConfigError("malformed loss history row in " + path.string());
        e.epoch = static_cast<int>(v[0]);
        e.train_mse = v[1];
        e.val_mse = v[2];
        e.train_mae = v[3];
        e.val_mae = v[4];
        h.epochs.push_back(e);
    }
    return h;
}

namespace {

Json layer_to_json(const LayerSpec& l) {
    Json j{{"kind", to_string(l.kind)}};
    switch (l.kind) {
        case LayerKind::dense: j["units"] = l.units; j["activation"] = to_string(l.activation); break;
        case LayerKind::conv1d:
            j["kernels"] = l.kernels;
            j["kernel_size"] = l.kernel_size;
            j["stride"] = l.stride;
            j["padding"] = l.padding;
            j["activation"] = to_string(l.activation);
            break;
        case LayerKind::maxpool1d: j["pool"] = l.pool; j["stride"] = l.stride; break;
        case LayerKind::rnn:
        case LayerKind::lstm:
        case LayerKind::gru:
            j["units"] = l.units;
            j["return_sequences"] = l.return_sequences;
            break;
        case LayerKind::bidirectional:
            j["cell"] = to_string(l.cell);
            j["units"] = l.units;
            j["return_sequences"] = l.return_sequences;
            break;
        case LayerKind::flatten: break;
    }
    return j;
}

LayerSpec layer_from_json(const Json& j) {
    const LayerKind kind = parse_layer_kind(j.at("kind").get<std::string>());
    switch (kind) {
        case LayerKind::dense:
            return LayerSpec::dense(j.at("units").get<int>(), parse_activation(j.at("activation").get<std::string>()));
        case LayerKind::conv1d:
            return LayerSpec::conv1d(j.at("kernels").get<int>(), j.at("kernel_size").get<int>(),
                                     parse_activation(j.at("activation").get<std::string>()),
                                     j.at("stride").get<int>(), j.at("padding").get<int>());
        case LayerKind::maxpool1d: return LayerSpec::maxpool1d(j.at("pool").get<int>(), j.at("stride").get<int>());
        case LayerKind::rnn:
        case LayerKind::lstm:
        case LayerKind::gru: {
            const CellKind c = parse_cell_kind(to_string(kind));
            return LayerSpec::recurrent(c, j.at("units").get<int>(), j.at("return_sequences").get<bool>());
        }
        case LayerKind::bidirectional:
            return LayerSpec::bidirectional(parse_cell_kind(j.at("cell").get<std::string>()), j.at("units").get<int>(),
                                            j.at("return_sequences").get<bool>());
        case LayerKind::flatten: return LayerSpec::flatten();
    }
    return LayerSpec::flatten();
}

}  // namespace

void save_model(const NetModel& model, const std::filesystem::path& path) {
    check_model(model);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    Json header{{"format", "qdbench-nnet"},
                {"name", model.spec.name},
                {"input_length", model.spec.input_length},
                {"input_channels", model.spec.input_channels},
                {"rng_seed", model.rng_seed},
                {"parameter_count", model.parameters.size()}};
    for (const auto& l : model.spec.layers) header["layers"].push_back(layer_to_json(l));
    for (const auto& b : parameter_layout(model.spec))
        header["shapes"].push_back({{"layer", b.layer}, {"name", b.name}, {"rows", b.rows}, {"cols", b.cols},
                                    {"offset", b.offset}});
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path);
    if (!f) throw MissingInputError("cannot write " + path.string());
    f << header.dump() << '\n' << std::setprecision(17);
    for (Eigen::Index i = 0; i < model.parameters.size(); ++i) f << model.parameters(i) << '\n';
}

NetModel load_model(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw MissingInputError("model file not found: " + path.string());
    std::string line;
    std::getline(f, line);
    Json header;
    try {
        header = Json::parse(line);
    } catch (const Json::exception& e) {
        throw ConfigError("bad model header in " + path.string() + ": " + e.what());
    }
    if (header.value("format", "") != "qdbench-nnet") throw ConfigError(path.string() + " is not a network model file");
    NetModel m;
    m.spec.name = header.at("name").get<std::string>();
    m.spec.input_length = header.at("input_length").get<int>();
    m.spec.input_channels = header.at("input_channels").get<int>();
    m.rng_seed = header.at("rng_seed").get<std::uint64_t>();
    for (const auto& l : header.at("layers")) m.spec.layers.push_back(layer_from_json(l));
    const std::size_t n = count_parameters(m.spec);
    if (header.at("parameter_count").get<std::size_t>() != n)
        throw ConfigError("parameter count in " + path.string() + " disagrees with its layer list");
    m.parameters.resize(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::getline(f, line)) throw ConfigError("truncated parameter payload in " + path.string());
        m.parameters(static_cast<Eigen::Index>(i)) = std::stod(line);
    }
    return m;
}

}  // namespace qdbench::nn
