#pragma once

#include <vector>

#include "polypseg/tensor.hpp"

namespace polypseg::ops {

// Elementwise with NumPy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact erf form
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);

// Elementwise binary cross entropy on logits, numerically stable:
// max(x,0) - x*t + log(1+exp(-|x|)). Returns a map the caller reduces.
Tensor bce_with_logits(const Tensor& logits, const Tensor& target);

Tensor sum(const Tensor& x);   // all elements -> [1]
Tensor mean(const Tensor& x);  // all elements -> [1]
Tensor sum_dim(const Tensor& x, int dim, bool keepdim);
Tensor mean_dim(const Tensor& x, int dim, bool keepdim);
Tensor max_dim(const Tensor& x, int dim, bool keepdim);  // first max on ties

Tensor reshape(const Tensor& x, Shape shape);  // one dim may be -1
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& xs, int dim);
Tensor narrow(const Tensor& x, int dim, std::int64_t start, std::int64_t length);

// [M,K]x[K,N] or batched [B,M,K]x[B,K,N].
Tensor matmul(const Tensor& a, const Tensor& b);
// x: [..., in], w: [out, in], b: [out] or undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// x: [N,C,H,W], w: [Co, C/groups, kh, kw], b: [Co] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
              std::int64_t stride, std::int64_t padding, std::int64_t groups = 1);

// Training mode uses batch statistics and updates running stats in place
// (biased batch variance for normalization, unbiased in the running update).
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var,
                    bool training, double momentum, double eps);

// Normalizes over the last dimension.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

Tensor softmax(const Tensor& x, int dim);

// align_corners=false semantics: src = max(0, (i+0.5)*in/out - 0.5).
Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w);

// Window d: [floor(i*in/out), ceil((i+1)*in/out)).
Tensor adaptive_avg_pool2d(const Tensor& x, std::int64_t out_h, std::int64_t out_w);

Tensor global_max_pool2d(const Tensor& x);  // [N,C,H,W] -> [N,C,1,1]
Tensor global_avg_pool2d(const Tensor& x);  // [N,C,H,W] -> [N,C,1,1]

// k x k box filter, stride 1, zero padding k/2, divisor always k*k.
Tensor avg_pool2d_samepad(const Tensor& x, std::int64_t k);

Tensor dropout(const Tensor& x, double p, bool training, Rng& rng);
// Drops whole samples along dim 0, rescaling survivors by 1/(1-p).
Tensor drop_path(const Tensor& x, double p, bool training, Rng& rng);

}  // namespace polypseg::ops
