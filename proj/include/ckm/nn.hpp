// SPDX-License-Identifier: Apache-2.0
//
// ckm - channel knowledge maps from environmental point clouds
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ------------------------------------------------------------------------

#ifndef CKM_NN_HPP
#define CKM_NN_HPP

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

// Layer primitives over a flat parameter vector. Every layer knows its offsets into the
// vector; forward passes keep what the matching backward pass needs and backward passes
// accumulate into a gradient vector with the same layout.

namespace ckm::nn
{

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using ConstMatMap = Eigen::Map<const Matrix>;
using MatMap = Eigen::Map<Matrix>;
using ConstVecMap = Eigen::Map<const Vector>;
using VecMap = Eigen::Map<Vector>;

// Affine map y = x W + b on row vectors. W is stored column-major, in x out.
struct Dense
{
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t w = 0; // offset of W
    std::size_t b = 0; // offset of b

    std::size_t size() const { return in * out + out; }

    ConstMatMap weight(std::span<const double> p) const
    {
        return ConstMatMap(p.data() + w, static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
    }
    ConstVecMap bias(std::span<const double> p) const
    {
        return ConstVecMap(p.data() + b, static_cast<Eigen::Index>(out));
    }
    MatMap weight(std::span<double> p) const
    {
        return MatMap(p.data() + w, static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
    }
    VecMap bias(std::span<double> p) const { return VecMap(p.data() + b, static_cast<Eigen::Index>(out)); }

    Matrix forward(std::span<const double> p, const Matrix &x) const
    {
        Matrix y = x * weight(p);
        y.rowwise() += bias(p).transpose();
        return y;
    }

    // Accumulates dW, db into grad and returns dL/dx.
    Matrix backward(std::span<const double> p, std::span<double> grad, const Matrix &x, const Matrix &dy) const
    {
        weight(grad).noalias() += x.transpose() * dy;
        bias(grad) += dy.colwise().sum().transpose();
        return dy * weight(p).transpose();
    }

    // Same as backward without the input gradient.
    void backward_params(std::span<double> grad, const Matrix &x, const Matrix &dy) const
    {
        weight(grad).noalias() += x.transpose() * dy;
        bias(grad) += dy.colwise().sum().transpose();
    }
};

// Stack of Dense + ReLU applied row-wise (shared across points).
struct SharedMlp
{
    std::vector<Dense> layers;

    std::size_t out() const { return layers.empty() ? 0 : layers.back().out; }

    struct Cache
    {
        std::vector<Matrix> acts; // acts[0] = input, acts[l + 1] = relu output of layer l
    };

    Matrix forward(std::span<const double> p, const Matrix &x, Cache &cache) const
    {
        cache.acts.clear();
        cache.acts.push_back(x);
        for (const auto &l : layers)
        {
            Matrix z = l.forward(p, cache.acts.back());
            cache.acts.push_back(z.cwiseMax(0.0));
        }
        return cache.acts.back();
    }

    // Returns dL/dx of the input unless `need_input_grad` is false (then an empty matrix).
    Matrix backward(std::span<const double> p, std::span<double> grad, const Cache &cache, Matrix dy,
                    bool need_input_grad = true) const
    {
        for (std::size_t l = layers.size(); l-- > 0;)
        {
            dy = dy.cwiseProduct((cache.acts[l + 1].array() > 0.0).cast<double>().matrix());
            if (l == 0 && !need_input_grad)
            {
                layers[l].backward_params(grad, cache.acts[l], dy);
                return {};
            }
            dy = layers[l].backward(p, grad, cache.acts[l], dy);
        }
        return dy;
    }
};

// Channel-wise max over consecutive groups of `group` rows. argmax holds, per output
// cell (row-major group x channel), the winning input row; the first maximum wins ties.
inline Matrix group_max(const Matrix &x, std::size_t group, std::vector<Eigen::Index> &argmax)
{
    const auto g = static_cast<Eigen::Index>(group);
    const Eigen::Index groups = x.rows() / g;
    const Eigen::Index ch = x.cols();
    Matrix out(groups, ch);
    argmax.assign(static_cast<std::size_t>(groups * ch), 0);
    for (Eigen::Index i = 0; i < groups; ++i)
        for (Eigen::Index c = 0; c < ch; ++c)
        {
            Eigen::Index best = i * g;
            double v = x(best, c);
            for (Eigen::Index r = i * g + 1; r < (i + 1) * g; ++r)
                if (x(r, c) > v)
                {
                    v = x(r, c);
                    best = r;
                }
            out(i, c) = v;
            argmax[static_cast<std::size_t>(i * ch + c)] = best;
        }
    return out;
}

inline Matrix group_max_backward(const Matrix &dy, Eigen::Index rows, const std::vector<Eigen::Index> &argmax)
{
    Matrix dx = Matrix::Zero(rows, dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i)
        for (Eigen::Index c = 0; c < dy.cols(); ++c)
            dx(argmax[static_cast<std::size_t>(i * dy.cols() + c)], c) += dy(i, c);
    return dx;
}

// Per-channel batch normalisation over the rows of a batch. gamma/beta live in the
// parameter vector; running statistics are kept outside it.
struct BatchNorm
{
    std::size_t dim = 0;
    std::size_t gamma = 0;
    std::size_t beta = 0;
    static constexpr double eps = 1e-5;
    static constexpr double momentum = 0.1;

    std::size_t size() const { return 2 * dim; }

    struct Stats
    {
        Vector mean;
        Vector var;
    };

    struct Cache
    {
        Matrix xhat;
        Vector inv_std;
        bool batch = false;
    };

    Matrix forward(std::span<const double> p, const Matrix &z, Stats &stats, bool use_batch, Cache &cache) const
    {
        const ConstVecMap g(p.data() + gamma, static_cast<Eigen::Index>(dim));
        const ConstVecMap bt(p.data() + beta, static_cast<Eigen::Index>(dim));
        Vector mu, var;
        cache.batch = use_batch;
        if (use_batch)
        {
            mu = z.colwise().mean().transpose();
            var = (z.rowwise() - mu.transpose()).array().square().colwise().mean().transpose();
            stats.mean = (1.0 - momentum) * stats.mean + momentum * mu;
            stats.var = (1.0 - momentum) * stats.var + momentum * var;
        }
        else
        {
            mu = stats.mean;
            var = stats.var;
        }
        cache.inv_std = (var.array() + eps).rsqrt().matrix();
        cache.xhat = (z.rowwise() - mu.transpose()).array().rowwise() * cache.inv_std.transpose().array();
        Matrix y = cache.xhat.array().rowwise() * g.transpose().array();
        y.rowwise() += bt.transpose();
        return y;
    }

    Matrix backward(std::span<const double> p, std::span<double> grad, const Cache &cache, const Matrix &dy) const
    {
        const ConstVecMap g(p.data() + gamma, static_cast<Eigen::Index>(dim));
        VecMap dg(grad.data() + gamma, static_cast<Eigen::Index>(dim));
        VecMap db(grad.data() + beta, static_cast<Eigen::Index>(dim));
        dg += dy.cwiseProduct(cache.xhat).colwise().sum().transpose();
        db += dy.colwise().sum().transpose();
        const Matrix dxhat = dy.array().rowwise() * g.transpose().array();
        if (!cache.batch)
            return dxhat.array().rowwise() * cache.inv_std.transpose().array();
        const double n = static_cast<double>(dy.rows());
        const Vector sum_dxhat = dxhat.colwise().sum().transpose();
        const Vector sum_dxhat_xhat = dxhat.cwiseProduct(cache.xhat).colwise().sum().transpose();
        Matrix dz = (n * dxhat).rowwise() - sum_dxhat.transpose();
        dz -= (cache.xhat.array().rowwise() * sum_dxhat_xhat.transpose().array()).matrix();
        dz = dz.array().rowwise() * (cache.inv_std.transpose().array() / n);
        return dz;
    }
};

inline double softplus(double z) { return z > 30.0 ? z : std::log1p(std::exp(z)); }
inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }
inline double softplus_inverse(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

} // namespace ckm::nn

#endif
