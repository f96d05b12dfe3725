#pragma once

// The attention network.
//
// A shared dilated-convolution extractor produces a feature volume
// f = f_f(x) with C channels at input resolution.  For each attribute k a
// small head emits a per-channel, per-position mask M_k = f_m^k(f) in (0,1),
// the mask modulates the features as (1 + M_k) * f, and a binary classifier
// head turns the modulated volume into a probability for that attribute.
// A multi-label head reads the unmodulated features, and a small decoder
// reconstructs the input from them, which keeps the shared features faithful
// to the image rather than collapsing to whatever the classifiers need.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mcam/checksum.hpp"
#include "mcam/graph.hpp"
#include "mcam/ops.hpp"
#include "mcam/random.hpp"
#include "mcam/tensor.hpp"

namespace mcam {

struct NetworkConfig {
  int64_t image_channels = 1;
  int64_t image_size = 32;
  int64_t feature_channels = 128;  // C: width of the shared feature volume
  int64_t num_attributes = 6;      // K: one mask + binary head per attribute
  // 3x3 convs with these dilations; widths are extractor_channels plus a
  // final conv to feature_channels, so sizes must satisfy
  // extractor_channels.size() + 1 == dilation_schedule.size().
  std::vector<int64_t> dilation_schedule = {1, 2, 4, 8};
  std::vector<int64_t> extractor_channels = {12, 16, 20};
  int64_t mask_hidden = 10;   // 1x1 bottleneck inside each mask head
  int64_t head_hidden = 32;   // hidden units in each binary head
  int64_t recon_hidden = 8;   // channels in the decoder's hidden conv
  uint64_t seed = 0;

  bool operator==(const NetworkConfig&) const = default;

  void validate() const {
    detail::check(image_channels >= 1, "config: image_channels must be >= 1");
    detail::check(feature_channels >= 1, "config: feature_channels must be >= 1");
    detail::check(num_attributes >= 1, "config: num_attributes must be >= 1");
    detail::check(!dilation_schedule.empty(), "config: dilation_schedule is empty");
    int64_t max_dilation = 1;
    for (int64_t d : dilation_schedule) {
      detail::check(d >= 1, "config: dilations must be >= 1");
      max_dilation = std::max(max_dilation, d);
    }
    detail::check(image_size >= 2 * max_dilation + 1,
                  "config: image_size " + std::to_string(image_size) +
                      " too small for max dilation " + std::to_string(max_dilation));
    detail::check(extractor_channels.size() + 1 == dilation_schedule.size(),
                  "config: need extractor_channels for all but the last dilated conv (" +
                      std::to_string(dilation_schedule.size() - 1) + "), got " +
                      std::to_string(extractor_channels.size()));
    for (int64_t c : extractor_channels)
      detail::check(c >= 1, "config: extractor channel counts must be >= 1");
    detail::check(mask_hidden >= 1, "config: mask_hidden must be >= 1");
    detail::check(head_hidden >= 1, "config: head_hidden must be >= 1");
    detail::check(recon_hidden >= 1, "config: recon_hidden must be >= 1");
  }
};

struct ConvParams {
  Tensor kernel, bias;
};

struct LinearParams {
  Tensor weight, bias;
};

struct Network {
  NetworkConfig config;

  std::vector<ConvParams> extractor;  // one per dilation_schedule entry

  struct MaskHead {
    ConvParams reduce;  // 1x1, C -> mask_hidden
    ConvParams expand;  // 1x1, mask_hidden -> C
  };
  std::vector<MaskHead> mask_heads;  // K heads

  struct BinaryHead {
    LinearParams hidden;  // C -> head_hidden
    LinearParams out;     // head_hidden -> 1
  };
  std::vector<BinaryHead> binary_heads;  // K heads

  LinearParams multilabel;  // C -> K

  ConvParams recon_hidden_conv;  // 3x3, C -> recon_hidden
  ConvParams recon_out_conv;     // 3x3, recon_hidden -> image_channels

  // Counts extractor forward passes, to confirm features are computed once
  // and shared across heads.
  std::shared_ptr<std::atomic<uint64_t>> feature_passes =
      std::make_shared<std::atomic<uint64_t>>(0);

  // Every trainable tensor in a fixed order; checkpoints and the optimizer
  // rely on this order being stable.
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    auto push_conv = [&out](const ConvParams& c) {
      out.push_back(c.kernel);
      out.push_back(c.bias);
    };
    auto push_linear = [&out](const LinearParams& l) {
      out.push_back(l.weight);
      out.push_back(l.bias);
    };
    for (const ConvParams& c : extractor) push_conv(c);
    for (const MaskHead& h : mask_heads) {
      push_conv(h.reduce);
      push_conv(h.expand);
    }
    for (const BinaryHead& h : binary_heads) {
      push_linear(h.hidden);
      push_linear(h.out);
    }
    push_linear(multilabel);
    push_conv(recon_hidden_conv);
    push_conv(recon_out_conv);
    return out;
  }

  uint64_t parameter_checksum() const {
    uint64_t state = kFnvOffset;
    for (const Tensor& p : parameters()) state = fnv1a64(p.data(), state);
    return state;
  }
};

namespace detail {

// Kernel entries ~ N(0, sqrt(2 / fan_in)), biases zero: keeps activation
// variance roughly constant through the leaky-ReLU stack.
inline ConvParams init_conv(Rng& rng, int64_t cout, int64_t cin, int64_t k) {
  ConvParams p;
  p.kernel = Tensor::zeros({cout, cin, k, k}, /*requires_grad=*/true);
  const double stddev = std::sqrt(2.0 / static_cast<double>(cin * k * k));
  for (double& v : p.kernel.data()) v = rng.normal(0.0, stddev);
  p.bias = Tensor::zeros({cout}, /*requires_grad=*/true);
  return p;
}

inline LinearParams init_linear(Rng& rng, int64_t dout, int64_t din) {
  LinearParams p;
  p.weight = Tensor::zeros({dout, din}, /*requires_grad=*/true);
  const double stddev = std::sqrt(2.0 / static_cast<double>(din));
  for (double& v : p.weight.data()) v = rng.normal(0.0, stddev);
  p.bias = Tensor::zeros({dout}, /*requires_grad=*/true);
  return p;
}

inline constexpr double kLeakySlope = 0.1;
inline constexpr uint64_t kInitSalt = 0x696e6974ull;  // stream tag for parameter draws

}  // namespace detail

// Builds a network with freshly initialized parameters.  Two calls with an
// equal config produce bit-identical parameters.
inline Network init_network(const NetworkConfig& config) {
  config.validate();
  Network net;
  net.config = config;
  Rng rng(hash_mix(config.seed, detail::kInitSalt));

  const int64_t n_convs = static_cast<int64_t>(config.dilation_schedule.size());
  int64_t in_ch = config.image_channels;
  for (int64_t i = 0; i < n_convs; ++i) {
    const int64_t out_ch = (i + 1 < n_convs) ? config.extractor_channels[static_cast<size_t>(i)]
                                             : config.feature_channels;
    net.extractor.push_back(detail::init_conv(rng, out_ch, in_ch, 3));
    in_ch = out_ch;
  }
  for (int64_t k = 0; k < config.num_attributes; ++k) {
    Network::MaskHead head;
    head.reduce = detail::init_conv(rng, config.mask_hidden, config.feature_channels, 1);
    head.expand = detail::init_conv(rng, config.feature_channels, config.mask_hidden, 1);
    net.mask_heads.push_back(std::move(head));
  }
  for (int64_t k = 0; k < config.num_attributes; ++k) {
    Network::BinaryHead head;
    head.hidden = detail::init_linear(rng, config.head_hidden, config.feature_channels);
    head.out = detail::init_linear(rng, 1, config.head_hidden);
    net.binary_heads.push_back(std::move(head));
  }
  net.multilabel = detail::init_linear(rng, config.num_attributes, config.feature_channels);
  net.recon_hidden_conv = detail::init_conv(rng, config.recon_hidden, config.feature_channels, 3);
  net.recon_out_conv = detail::init_conv(rng, config.image_channels, config.recon_hidden, 3);
  return net;
}

// Shared features: the dilated 3x3 stack with leaky-ReLU activations.
// Input [N, image_channels, S, S] -> [N, C, S, S].
inline Tensor extract_features(Graph& g, const Network& net, const Tensor& images) {
  detail::check(images.ndim() == 4 && images.dim(1) == net.config.image_channels &&
                    images.dim(2) == net.config.image_size &&
                    images.dim(3) == net.config.image_size,
                "extract_features: expected [N," + std::to_string(net.config.image_channels) +
                    "," + std::to_string(net.config.image_size) + "," +
                    std::to_string(net.config.image_size) + "], got " +
                    shape_str(images.shape()));
  Tensor h = images;
  for (size_t i = 0; i < net.extractor.size(); ++i) {
    h = conv2d(g, h, net.extractor[i].kernel, net.extractor[i].bias,
               net.config.dilation_schedule[i]);
    h = leaky_relu(g, h, detail::kLeakySlope);
  }
  net.feature_passes->fetch_add(1, std::memory_order_relaxed);
  return h;
}

// Per-attribute mask head: 1x1 bottleneck then sigmoid, so every channel and
// position gets its own gate in (0,1).  [N,C,S,S] -> [N,C,S,S].
//
// The head runs as one fused node.  Per sample, both 1x1 convolutions are
// small GEMMs on a cache-resident block and the activations are applied in
// place, which avoids streaming four full-size intermediates through memory.
// Values are bitwise identical to composing conv2d / leaky_relu / conv2d /
// sigmoid: the per-sample products, bias adds, and elementwise kernels are
// exactly the ones those ops use, in the same order.
inline Tensor attention_mask(Graph& g, const Network& net, const Tensor& features, int64_t k) {
  detail::check(k >= 0 && k < net.config.num_attributes,
                "attention_mask: attribute " + std::to_string(k) + " out of range [0," +
                    std::to_string(net.config.num_attributes) + ")");
  const int64_t C = net.config.feature_channels, mh = net.config.mask_hidden;
  detail::check(features.ndim() == 4 && features.dim(1) == C,
                "attention_mask: features must be [N," + std::to_string(C) + ",H,W], got " +
                    shape_str(features.shape()));
  detail::check_finite_once(g, features, "attention_mask", "features");
  const Network::MaskHead& head = net.mask_heads[static_cast<size_t>(k)];
  const int64_t n = features.dim(0), h = features.dim(2), w = features.dim(3), hw = h * w;

  Tensor hidden = Tensor::uninitialized({n, mh, h, w});  // kept: backward needs it
  Tensor out = Tensor::uninitialized({n, C, h, w});
  {
    detail::ConstMatMap k1(head.reduce.kernel.data().data(), mh, C);
    detail::ConstVecMap b1(head.reduce.bias.data().data(), mh);
    detail::ConstMatMap k2(head.expand.kernel.data().data(), C, mh);
    detail::ConstVecMap b2(head.expand.bias.data().data(), C);
    for (int64_t i = 0; i < n; ++i) {
      detail::ConstMatMap fmat(features.data().data() + i * C * hw, C, hw);
      detail::MatMap hmat(hidden.data().data() + i * mh * hw, mh, hw);
      hmat.noalias() = k1 * fmat;
      hmat.colwise() += b1;
      detail::leaky_relu_kernel(hmat.data(), hmat.data(), mh * hw, detail::kLeakySlope);
      detail::MatMap omat(out.data().data() + i * C * hw, C, hw);
      omat.noalias() = k2 * hmat;
      omat.colwise() += b2;
      detail::sigmoid_kernel(omat.data(), omat.data(), C * hw);
    }
  }

  if (detail::grad_needed(g, {&features, &head.reduce.kernel, &head.reduce.bias,
                              &head.expand.kernel, &head.expand.bias})) {
    out.set_requires_grad(true);
    Tensor f_c = features, hid_c = hidden, out_c = out;
    Tensor k1_c = head.reduce.kernel, b1_c = head.reduce.bias;
    Tensor k2_c = head.expand.kernel, b2_c = head.expand.bias;
    g.record(
        {features, head.reduce.kernel, head.reduce.bias, head.expand.kernel, head.expand.bias},
        out,
        [f_c, hid_c, out_c, k1_c, b1_c, k2_c, b2_c, n, C, mh, hw]() mutable {
          const int64_t chw = C * hw, mhw = mh * hw;
          auto dz2_buf = std::make_unique_for_overwrite<double[]>(static_cast<size_t>(chw));
          auto dz1_buf = std::make_unique_for_overwrite<double[]>(static_cast<size_t>(mhw));
          detail::ConstMatMap k1(k1_c.data().data(), mh, C);
          detail::ConstMatMap k2(k2_c.data().data(), C, mh);
          const bool need_df = f_c.requires_grad();
          double* dfp = nullptr;
          bool df_fresh = false;
          if (need_df) {
            auto [buf, fresh] = f_c.grad_sink();
            dfp = buf.data();
            df_fresh = fresh;
          }
          for (int64_t i = 0; i < n; ++i) {
            // Through the sigmoid: dz2 = dL/dM * M * (1 - M).
            const double* go = out_c.grad().data() + i * chw;
            const double* s = out_c.data().data() + i * chw;
            double* dz2 = dz2_buf.get();
            for (int64_t t = 0; t < chw; ++t) dz2[t] = go[t] * s[t] * (1.0 - s[t]);
            // Sequential per-channel sums keep bias grads independent of heap
            // addresses (same reasoning as conv2d's bias path).
            if (b2_c.requires_grad()) {
              double* db2 = b2_c.grad().data();
              for (int64_t c = 0; c < C; ++c) {
                double acc = 0.0;
                const double* row = dz2 + c * hw;
                for (int64_t t = 0; t < hw; ++t) acc += row[t];
                db2[c] += acc;
              }
            }
            detail::ConstMatMap z2m(dz2, C, hw);
            detail::ConstMatMap hmat(hid_c.data().data() + i * mhw, mh, hw);
            if (k2_c.requires_grad()) {
              detail::MatMap dk2(k2_c.grad().data(), C, mh);
              dk2.noalias() += z2m * hmat.transpose();
            }
            // Through the expand conv and the leaky rectifier.  The slope is
            // positive, so the stored activation has the pre-activation sign
            // and can drive the derivative choice directly.
            double* dz1 = dz1_buf.get();
            detail::MatMap z1m(dz1, mh, hw);
            z1m.noalias() = k2.transpose() * z2m;
            const double* hp = hid_c.data().data() + i * mhw;
            for (int64_t t = 0; t < mhw; ++t)
              dz1[t] *= (hp[t] >= 0.0 ? 1.0 : detail::kLeakySlope);
            if (b1_c.requires_grad()) {
              double* db1 = b1_c.grad().data();
              for (int64_t c = 0; c < mh; ++c) {
                double acc = 0.0;
                const double* row = dz1 + c * hw;
                for (int64_t t = 0; t < hw; ++t) acc += row[t];
                db1[c] += acc;
              }
            }
            detail::ConstMatMap z1cm(dz1, mh, hw);
            detail::ConstMatMap fmat(f_c.data().data() + i * chw, C, hw);
            if (k1_c.requires_grad()) {
              detail::MatMap dk1(k1_c.grad().data(), mh, C);
              dk1.noalias() += z1cm * fmat.transpose();
            }
            if (need_df) {
              detail::MatMap dfm(dfp + i * chw, C, hw);
              if (df_fresh)
                dfm.noalias() = k1.transpose() * z1cm;
              else
                dfm.noalias() += k1.transpose() * z1cm;
            }
          }
        },
        "attention_mask");
  }
  return out;
}

// Residual modulation (1 + mask) * features, fused into one node: a zero
// mask passes features through bit-identically.
inline Tensor apply_attention(Graph& g, const Tensor& features, const Tensor& mask) {
  detail::check_same_shape(features, mask, "apply_attention");
  return modulate(g, features, mask);
}

namespace detail {

// Classifier stack of binary head k on an already-pooled [N,C] vector:
// affine -> leaky -> affine -> sigmoid -> [N].
inline Tensor binary_head_from_pooled(Graph& g, const Network& net, const Tensor& pooled,
                                      int64_t k) {
  const Network::BinaryHead& head = net.binary_heads[static_cast<size_t>(k)];
  Tensor h = leaky_relu(g, linear(g, pooled, head.hidden.weight, head.hidden.bias),
                        detail::kLeakySlope);
  Tensor logit = linear(g, h, head.out.weight, head.out.bias);  // [N,1]
  return reshape(g, sigmoid(g, logit), {pooled.dim(0)});
}

struct AttributeHeads {
  std::vector<Tensor> masks;   // K x [N,C,H,W]
  std::vector<Tensor> masked;  // K x [N,C,H,W], (1 + mask) * features
  std::vector<Tensor> pooled;  // K x [N,C], spatial mean of masked
};

// Every attribute's mask, modulated volume, and pooled summary as one
// recorded node.  Per sample the feature block is loaded once and stays
// cache-resident while all K heads derive their outputs from it; composing
// attention_mask / apply_attention / global_avg_pool instead streams each
// full-size intermediate through memory once per head.  Values are bitwise
// identical to that composition: the per-sample GEMMs, bias adds, and
// activation kernels are exactly the ones those ops run, the product is the
// same single-rounded f * (1 + m) store, and the pooled sums read the stored
// product rows with global_avg_pool's sequential loop.
inline AttributeHeads attribute_heads(Graph& g, const Network& net, const Tensor& features) {
  const int64_t C = net.config.feature_channels, mh = net.config.mask_hidden;
  const int64_t K = net.config.num_attributes;
  detail::check(features.ndim() == 4 && features.dim(1) == C,
                "attribute_heads: features must be [N," + std::to_string(C) + ",H,W], got " +
                    shape_str(features.shape()));
  detail::check_finite_once(g, features, "attribute_heads", "features");
  const int64_t n = features.dim(0), h = features.dim(2), w = features.dim(3), hw = h * w;
  const int64_t chw = C * hw, mhw = mh * hw;

  bool params_need_grad = false;
  for (const Network::MaskHead& head : net.mask_heads)
    params_need_grad = params_need_grad || head.reduce.kernel.requires_grad() ||
                       head.reduce.bias.requires_grad() || head.expand.kernel.requires_grad() ||
                       head.expand.bias.requires_grad();
  const bool recording = g.recording() && (features.requires_grad() || params_need_grad);

  AttributeHeads out;
  std::vector<Tensor> hiddens;  // pre-mask activations, kept for backward
  for (int64_t k = 0; k < K; ++k) {
    out.masks.push_back(Tensor::uninitialized({n, C, h, w}));
    out.masked.push_back(Tensor::uninitialized({n, C, h, w}));
    out.pooled.push_back(Tensor::uninitialized({n, C}));
    if (recording) hiddens.push_back(Tensor::uninitialized({n, mh, h, w}));
  }
  std::unique_ptr<double[]> hscratch;  // reused hidden block when not recording
  if (!recording) hscratch = std::make_unique_for_overwrite<double[]>(static_cast<size_t>(mhw));

  for (int64_t i = 0; i < n; ++i) {
    const double* fp = features.data().data() + i * chw;
    detail::ConstMatMap fmat(fp, C, hw);
    for (int64_t k = 0; k < K; ++k) {
      const Network::MaskHead& head = net.mask_heads[static_cast<size_t>(k)];
      detail::ConstMatMap k1(head.reduce.kernel.data().data(), mh, C);
      detail::ConstVecMap b1(head.reduce.bias.data().data(), mh);
      detail::ConstMatMap k2(head.expand.kernel.data().data(), C, mh);
      detail::ConstVecMap b2(head.expand.bias.data().data(), C);
      double* hbase =
          recording ? hiddens[static_cast<size_t>(k)].data().data() + i * mhw : hscratch.get();
      detail::MatMap hmat(hbase, mh, hw);
      hmat.noalias() = k1 * fmat;
      hmat.colwise() += b1;
      detail::leaky_relu_kernel(hbase, hbase, mhw, detail::kLeakySlope);
      double* mbase = out.masks[static_cast<size_t>(k)].data().data() + i * chw;
      detail::MatMap mmat(mbase, C, hw);
      mmat.noalias() = k2 * hmat;
      mmat.colwise() += b2;
      detail::sigmoid_kernel(mbase, mbase, chw);
      double* xbase = out.masked[static_cast<size_t>(k)].data().data() + i * chw;
      double* pv = out.pooled[static_cast<size_t>(k)].data().data() + i * C;
      for (int64_t c = 0; c < C; ++c) {
        const double* fr = fp + c * hw;
        const double* mr = mbase + c * hw;
        double* xr = xbase + c * hw;
        for (int64_t t = 0; t < hw; ++t) xr[t] = fr[t] * (1.0 + mr[t]);
        double acc = 0.0;
        for (int64_t t = 0; t < hw; ++t) acc += xr[t];
        pv[c] = acc / static_cast<double>(hw);
      }
    }
  }

  if (recording) {
    std::vector<Tensor> inputs{features};
    std::vector<Tensor> k1s, b1s, k2s, b2s;
    for (const Network::MaskHead& head : net.mask_heads) {
      inputs.push_back(head.reduce.kernel);
      inputs.push_back(head.reduce.bias);
      inputs.push_back(head.expand.kernel);
      inputs.push_back(head.expand.bias);
      k1s.push_back(head.reduce.kernel);
      b1s.push_back(head.reduce.bias);
      k2s.push_back(head.expand.kernel);
      b2s.push_back(head.expand.bias);
    }
    std::vector<Tensor> node_outputs;
    for (const Tensor& t : out.masks) node_outputs.push_back(t);
    for (const Tensor& t : out.masked) node_outputs.push_back(t);
    for (const Tensor& t : out.pooled) node_outputs.push_back(t);
    for (Tensor& t : node_outputs) t.set_requires_grad(true);
    Tensor f_c = features;
    std::vector<Tensor> masks_c = out.masks, masked_c = out.masked, pooled_c = out.pooled;
    g.record_multi(
        std::move(inputs), node_outputs,
        [f_c, hiddens, masks_c, masked_c, pooled_c, k1s, b1s, k2s, b2s, n, C, mh, hw, K, chw,
         mhw]() mutable {
          auto dz2_buf = std::make_unique_for_overwrite<double[]>(static_cast<size_t>(chw));
          auto dz1_buf = std::make_unique_for_overwrite<double[]>(static_cast<size_t>(mhw));
          const double inv = 1.0 / static_cast<double>(hw);
          const bool need_df = f_c.requires_grad();
          double* dfp = nullptr;
          bool df_fresh = false;
          if (need_df) {
            auto [buf, fresh] = f_c.grad_sink();
            dfp = buf.data();
            df_fresh = fresh;
          }
          for (int64_t i = 0; i < n; ++i) {
            const double* fp = f_c.data().data() + i * chw;
            detail::ConstMatMap fmat(fp, C, hw);
            double* df = need_df ? dfp + i * chw : nullptr;
            if (need_df && df_fresh) std::fill(df, df + chw, 0.0);
            for (int64_t k = 0; k < K; ++k) {
              const size_t ks = static_cast<size_t>(k);
              const bool mask_g = masks_c[ks].has_grad();
              const bool pool_g = pooled_c[ks].has_grad();
              const bool masked_g = masked_c[ks].has_grad();
              if (!mask_g && !pool_g && !masked_g) continue;
              const double* s = masks_c[ks].data().data() + i * chw;
              double* dz2 = dz2_buf.get();
              // dL/dM assembled from every consumer of the mask, then taken
              // through the sigmoid.  The pooled and modulated paths also
              // contribute the (1 + m)-weighted terms to dL/df directly.
              if (mask_g) {
                const double* gm = masks_c[ks].grad().data() + i * chw;
                std::copy(gm, gm + chw, dz2);
              } else {
                std::fill(dz2, dz2 + chw, 0.0);
              }
              if (pool_g) {
                const double* gp = pooled_c[ks].grad().data() + i * C;
                for (int64_t c = 0; c < C; ++c) {
                  const double gi = gp[c] * inv;
                  const double* fr = fp + c * hw;
                  const double* mr = s + c * hw;
                  double* zr = dz2 + c * hw;
                  if (need_df) {
                    double* dr = df + c * hw;
                    for (int64_t t = 0; t < hw; ++t) {
                      zr[t] += gi * fr[t];
                      dr[t] += gi * (1.0 + mr[t]);
                    }
                  } else {
                    for (int64_t t = 0; t < hw; ++t) zr[t] += gi * fr[t];
                  }
                }
              }
              if (masked_g) {
                const double* gx = masked_c[ks].grad().data() + i * chw;
                if (need_df) {
                  for (int64_t t = 0; t < chw; ++t) {
                    dz2[t] += gx[t] * fp[t];
                    df[t] += gx[t] * (1.0 + s[t]);
                  }
                } else {
                  for (int64_t t = 0; t < chw; ++t) dz2[t] += gx[t] * fp[t];
                }
              }
              for (int64_t t = 0; t < chw; ++t) dz2[t] *= s[t] * (1.0 - s[t]);
              // The two 1x1 stages, exactly as attention_mask's backward.
              if (b2s[ks].requires_grad()) {
                double* db2 = b2s[ks].grad().data();
                for (int64_t c = 0; c < C; ++c) {
                  double acc = 0.0;
                  const double* row = dz2 + c * hw;
                  for (int64_t t = 0; t < hw; ++t) acc += row[t];
                  db2[c] += acc;
                }
              }
              detail::ConstMatMap z2m(dz2, C, hw);
              const double* hp = hiddens[ks].data().data() + i * mhw;
              detail::ConstMatMap hmat(hp, mh, hw);
              if (k2s[ks].requires_grad()) {
                detail::MatMap dk2(k2s[ks].grad().data(), C, mh);
                dk2.noalias() += z2m * hmat.transpose();
              }
              double* dz1 = dz1_buf.get();
              detail::MatMap z1m(dz1, mh, hw);
              detail::ConstMatMap k2(k2s[ks].data().data(), C, mh);
              z1m.noalias() = k2.transpose() * z2m;
              for (int64_t t = 0; t < mhw; ++t)
                dz1[t] *= (hp[t] >= 0.0 ? 1.0 : detail::kLeakySlope);
              if (b1s[ks].requires_grad()) {
                double* db1 = b1s[ks].grad().data();
                for (int64_t c = 0; c < mh; ++c) {
                  double acc = 0.0;
                  const double* row = dz1 + c * hw;
                  for (int64_t t = 0; t < hw; ++t) acc += row[t];
                  db1[c] += acc;
                }
              }
              detail::ConstMatMap z1cm(dz1, mh, hw);
              if (k1s[ks].requires_grad()) {
                detail::MatMap dk1(k1s[ks].grad().data(), mh, C);
                dk1.noalias() += z1cm * fmat.transpose();
              }
              if (need_df) {
                detail::ConstMatMap k1(k1s[ks].data().data(), mh, C);
                detail::MatMap dfm(df, C, hw);
                dfm.noalias() += k1.transpose() * z1cm;
              }
            }
          }
        },
        "attribute_heads");
  }
  return out;
}

}  // namespace detail

// Probability that attribute k is present, from the modulated features.
// [N,C,S,S] -> [N].
inline Tensor predict_binary(Graph& g, const Network& net, const Tensor& masked_features,
                             int64_t k) {
  detail::check(k >= 0 && k < net.config.num_attributes,
                "predict_binary: attribute " + std::to_string(k) + " out of range [0," +
                    std::to_string(net.config.num_attributes) + ")");
  return detail::binary_head_from_pooled(g, net, global_avg_pool(g, masked_features), k);
}

// All-attribute probabilities from the unmodulated features: [N,C,S,S] -> [N,K].
inline Tensor predict_multilabel(Graph& g, const Network& net, const Tensor& features) {
  Tensor pooled = global_avg_pool(g, features);
  return sigmoid(g, linear(g, pooled, net.multilabel.weight, net.multilabel.bias));
}

// Decoder: features back to an image in (0,1).  [N,C,S,S] -> [N,image_channels,S,S].
inline Tensor reconstruct(Graph& g, const Network& net, const Tensor& features) {
  Tensor h = conv2d(g, features, net.recon_hidden_conv.kernel, net.recon_hidden_conv.bias, 1);
  h = leaky_relu(g, h, detail::kLeakySlope);
  h = conv2d(g, h, net.recon_out_conv.kernel, net.recon_out_conv.bias, 1);
  return sigmoid(g, h);
}

struct ForwardOutputs {
  Tensor features;                      // [N,C,S,S]
  std::vector<Tensor> masks;            // K x [N,C,S,S]
  std::vector<Tensor> masked_features;  // K x [N,C,S,S]
  Tensor binary_probs;                  // [N,K], column k from head k
  Tensor multilabel_probs;              // [N,K]
  Tensor reconstruction;                // [N,image_channels,S,S]
};

// One full pass: the extractor runs once and every head reads its output.
inline ForwardOutputs forward_full(Graph& g, const Network& net, const Tensor& images) {
  ForwardOutputs out;
  out.features = extract_features(g, net, images);
  detail::AttributeHeads heads = detail::attribute_heads(g, net, out.features);
  out.masks = std::move(heads.masks);
  out.masked_features = std::move(heads.masked);
  std::vector<Tensor> prob_columns;
  for (int64_t k = 0; k < net.config.num_attributes; ++k)
    prob_columns.push_back(detail::binary_head_from_pooled(g, net, heads.pooled[k], k));
  out.binary_probs = stack_columns(g, prob_columns);
  out.multilabel_probs = predict_multilabel(g, net, out.features);
  out.reconstruction = reconstruct(g, net, out.features);
  return out;
}

}  // namespace mcam
