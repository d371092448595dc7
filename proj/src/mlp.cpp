// SPDX-License-Identifier: Apache-2.0
#include "bspde/mlp.hpp"

#include <cmath>
#include <string>

#include "binary_io.hpp"
#include "bspde/errors.hpp"
#include "bspde/rand_paths.hpp"

namespace bspde {

Mlp::Mlp(std::vector<int> widths) : widths_(std::move(widths)) {
    require(widths_.size() >= 2, "Mlp: need at least input and output widths");
    Eigen::Index total = 0;
    for (std::size_t l = 0; l < widths_.size(); ++l) {
        require(widths_[l] >= 1, "Mlp: widths must be positive, got " + std::to_string(widths_[l]) +
                                     " at position " + std::to_string(l));
    }
    for (int l = 0; l < layers(); ++l) {
        offsets_.push_back(total);
        total += static_cast<Eigen::Index>(widths_[l + 1]) * (widths_[l] + 1);
    }
    params_ = Eigen::VectorXd::Zero(total);
}

Mlp Mlp::init(std::vector<int> widths, std::uint64_t seed) {
    Mlp net(std::move(widths));
    for (int l = 0; l < net.layers(); ++l) {
        const double bound = std::sqrt(6.0 / net.widths_[l]);
        auto w = net.weight(l);
        for (Eigen::Index k = 0; k < w.size(); ++k) {
            const double u = counter_uniform(seed, static_cast<std::uint64_t>(l), static_cast<std::uint64_t>(k));
            w.data()[k] = bound * (2.0 * u - 1.0);
        }
    }
    return net;
}

Eigen::Map<Eigen::MatrixXd> Mlp::weight(int l) {
    return {params_.data() + offsets_[l], widths_[l + 1], widths_[l]};
}

Eigen::Map<const Eigen::MatrixXd> Mlp::weight(int l) const {
    return {params_.data() + offsets_[l], widths_[l + 1], widths_[l]};
}

Eigen::Map<Eigen::VectorXd> Mlp::bias(int l) {
    return {params_.data() + offsets_[l] + static_cast<Eigen::Index>(widths_[l + 1]) * widths_[l], widths_[l + 1]};
}

Eigen::Map<const Eigen::VectorXd> Mlp::bias(int l) const {
    return {params_.data() + offsets_[l] + static_cast<Eigen::Index>(widths_[l + 1]) * widths_[l], widths_[l + 1]};
}

namespace {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
Mat<Scalar> run_forward(const Mlp& net, const Mat<Scalar>& x, std::vector<Mat<Scalar>>* acts) {
    Mat<Scalar> a = x;
    if (acts) {
        acts->clear();
        acts->push_back(a);
    }
    for (int l = 0; l < net.layers(); ++l) {
        const Mat<Scalar> w = net.weight(l).cast<Scalar>();
        const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> b = net.bias(l).cast<Scalar>();
        Mat<Scalar> z = w * a;
        z.colwise() += b;
        if (l + 1 < net.layers()) z = z.cwiseMax(Scalar(0));
        a = std::move(z);
        if (acts) acts->push_back(a);
    }
    return a;
}

template <typename Scalar>
void run_backward(const Mlp& net, const std::vector<Mat<Scalar>>& acts, const Eigen::MatrixXd& upstream,
                  Eigen::VectorXd& grad, Eigen::MatrixXd* input_grad) {
    Mat<Scalar> delta = upstream.cast<Scalar>();
    Eigen::Index offset = grad.size();
    for (int l = net.layers() - 1; l >= 0; --l) {
        const Eigen::Index out = net.widths()[l + 1];
        const Eigen::Index in = net.widths()[l];
        offset -= out * (in + 1);
        const Mat<Scalar> gw = delta * acts[l].transpose();
        Eigen::Map<Eigen::MatrixXd>(grad.data() + offset, out, in) += gw.template cast<double>();
        Eigen::Map<Eigen::VectorXd>(grad.data() + offset + out * in, out) +=
            delta.rowwise().sum().template cast<double>();
        if (l > 0 || input_grad) {
            Mat<Scalar> next = net.weight(l).cast<Scalar>().transpose() * delta;
            if (l > 0) {
                // ReLU subgradient: zero where the unit is inactive (preactivation <= 0).
                next = (acts[l].array() > Scalar(0)).select(next, Scalar(0));
                delta = std::move(next);
            } else {
                *input_grad = next.template cast<double>();
            }
        }
    }
}

}  // namespace

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x) const {
    require(x.rows() == input_dim(), "Mlp::forward: expected input dimension " + std::to_string(input_dim()) +
                                         ", got " + std::to_string(x.rows()));
    if (precision == Precision::Single) {
        return run_forward<float>(*this, x.cast<float>(), nullptr).cast<double>();
    }
    return run_forward<double>(*this, x, nullptr);
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x, MlpCache& cache) const {
    require(x.rows() == input_dim(), "Mlp::forward: expected input dimension " + std::to_string(input_dim()) +
                                         ", got " + std::to_string(x.rows()));
    cache.owner = this;
    cache.valid = true;
    if (precision == Precision::Single) {
        cache.acts.clear();
        return run_forward<float>(*this, x.cast<float>(), &cache.acts_f).cast<double>();
    }
    cache.acts_f.clear();
    return run_forward<double>(*this, x, &cache.acts);
}

Eigen::VectorXd Mlp::forward(const Eigen::VectorXd& x) const {
    return forward(Eigen::MatrixXd(x)).col(0);
}

void Mlp::backward(const MlpCache& cache, const Eigen::MatrixXd& upstream, Eigen::VectorXd& grad,
                   Eigen::MatrixXd* input_grad) const {
    const bool single = precision == Precision::Single;
    const std::size_t n_acts = single ? cache.acts_f.size() : cache.acts.size();
    if (!cache.valid || cache.owner != this || n_acts != widths_.size()) {
        throw InvalidState("Mlp::backward: no forward cache for this network");
    }
    const Eigen::Index batch = single ? cache.acts_f.back().cols() : cache.acts.back().cols();
    require(upstream.rows() == output_dim() && upstream.cols() == batch, "Mlp::backward: upstream shape mismatch");
    require(grad.size() == parameter_count(), "Mlp::backward: gradient size mismatch");
    if (single) {
        run_backward<float>(*this, cache.acts_f, upstream, grad, input_grad);
    } else {
        run_backward<double>(*this, cache.acts, upstream, grad, input_grad);
    }
}

Adam::Adam(Eigen::Index n, AdamOptions options)
    : m(Eigen::VectorXd::Zero(n)), v(Eigen::VectorXd::Zero(n)), options_(options) {
    require(options.lr > 0.0 && options.beta1 >= 0.0 && options.beta1 < 1.0 && options.beta2 >= 0.0 &&
                options.beta2 < 1.0 && options.eps > 0.0,
            "Adam: invalid hyperparameters");
}

void Adam::step(Eigen::VectorXd& params, const Eigen::VectorXd& grads) {
    require(params.size() == m.size() && grads.size() == m.size(), "Adam::step: shape mismatch");
    if (!grads.allFinite()) throw NumericFailure("Adam::step: non-finite gradient");
    ++t_;
    const double b1 = options_.beta1;
    const double b2 = options_.beta2;
    m = b1 * m + (1.0 - b1) * grads;
    v = b2 * v + (1.0 - b2) * grads.cwiseProduct(grads);
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    params.array() -= options_.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + options_.eps);
}

void save_checkpoint(const Mlp& net, std::ostream& out) {
    detail::put_u64(out, net.widths().size());
    for (int w : net.widths()) detail::put_u64(out, static_cast<std::uint64_t>(w));
    for (int l = 0; l < net.layers(); ++l) {
        const auto w = net.weight(l);
        for (Eigen::Index r = 0; r < w.rows(); ++r) {
            for (Eigen::Index c = 0; c < w.cols(); ++c) detail::put_f64(out, w(r, c));
        }
        const auto b = net.bias(l);
        for (Eigen::Index r = 0; r < b.size(); ++r) detail::put_f64(out, b(r));
    }
    if (!out) throw InvalidState("save_checkpoint: write failed");
}

Mlp load_checkpoint(std::istream& in) {
    const std::uint64_t count = detail::get_u64(in, "load_checkpoint");
    require(count >= 2 && count < 1024, "load_checkpoint: implausible layer count");
    std::vector<int> widths;
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t w = detail::get_u64(in, "load_checkpoint");
        require(w >= 1 && w < (1u << 20), "load_checkpoint: implausible width");
        widths.push_back(static_cast<int>(w));
    }
    Mlp net(widths);
    for (int l = 0; l < net.layers(); ++l) {
        auto w = net.weight(l);
        for (Eigen::Index r = 0; r < w.rows(); ++r) {
            for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = detail::get_f64(in, "load_checkpoint");
        }
        auto b = net.bias(l);
        for (Eigen::Index r = 0; r < b.size(); ++r) b(r) = detail::get_f64(in, "load_checkpoint");
    }
    return net;
}

}  // namespace bspde
