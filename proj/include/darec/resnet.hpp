#ifndef DAREC_RESNET_HPP_
#define DAREC_RESNET_HPP_

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "darec/nn/layers.hpp"

namespace darec::nn {

/// Bottleneck residual block: 1x1 reduce, 3x3 (carries the stride), 1x1
/// expand by 4, each followed by batch norm; identity or projected shortcut.
template <class S>
class Bottleneck2d : public Layer<S> {
 public:
  Bottleneck2d(const std::string& name, std::size_t in_ch, std::size_t mid_ch,
               std::size_t stride, bool project)
      : in_ch_(in_ch),
        out_ch_(4 * mid_ch),
        stride_(stride),
        conv1_(name + ".conv1", in_ch, mid_ch, 1, 1, 0),
        bn1_(name + ".bn1", mid_ch),
        conv2_(name + ".conv2", mid_ch, mid_ch, 3, stride, 1),
        bn2_(name + ".bn2", mid_ch),
        conv3_(name + ".conv3", mid_ch, 4 * mid_ch, 1, 1, 0),
        bn3_(name + ".bn3", 4 * mid_ch) {
    if (project) {
      proj_conv_ = std::make_unique<Conv2d<S>>(name + ".proj", in_ch, 4 * mid_ch, 1,
                                               stride, 0);
      proj_bn_ = std::make_unique<BatchNorm2d<S>>(name + ".proj_bn", 4 * mid_ch);
    } else if (stride != 1 || in_ch != 4 * mid_ch) {
      throw ConfigError("Bottleneck2d: identity shortcut needs matching shape");
    }
  }

  void init(RandomStream& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
    conv3_.init(rng);
    if (proj_conv_) proj_conv_->init(rng);
  }

  Tensor<S> forward(const Tensor<S>& x, bool train) override {
    Tensor<S> m = relu1_.forward(bn1_.forward(conv1_.forward(x, train), train), train);
    m = relu2_.forward(bn2_.forward(conv2_.forward(m, train), train), train);
    m = bn3_.forward(conv3_.forward(m, train), train);
    Tensor<S> side =
        proj_conv_ ? proj_bn_->forward(proj_conv_->forward(x, train), train) : x;
    if (!m.same_shape(side)) throw InvalidInputError("Bottleneck2d: branch shape mismatch");
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += side[i];
    return relu_out_.forward(m, train);
  }

  Tensor<S> backward(const Tensor<S>& gy) override {
    const Tensor<S> g = relu_out_.backward(gy);
    Tensor<S> gmain = conv1_.backward(
        bn1_.backward(relu1_.backward(conv2_.backward(bn2_.backward(
            relu2_.backward(conv3_.backward(bn3_.backward(g))))))));
    if (proj_conv_) {
      const Tensor<S> gside = proj_conv_->backward(proj_bn_->backward(g));
      for (std::size_t i = 0; i < gmain.size(); ++i) gmain[i] += gside[i];
    } else {
      for (std::size_t i = 0; i < gmain.size(); ++i) gmain[i] += g[i];
    }
    return gmain;
  }

  std::vector<Param<S>*> params() override {
    std::vector<Param<S>*> out;
    for (Layer<S>* l : std::vector<Layer<S>*>{&conv1_, &bn1_, &conv2_, &bn2_, &conv3_,
                                              &bn3_})
      for (auto* p : l->params()) out.push_back(p);
    if (proj_conv_) {
      for (auto* p : proj_conv_->params()) out.push_back(p);
      for (auto* p : proj_bn_->params()) out.push_back(p);
    }
    return out;
  }

  LayerInfo info() const override { return {"bottleneck2d", 3, stride_, in_ch_, out_ch_}; }

 private:
  std::size_t in_ch_, out_ch_, stride_;
  Conv2d<S> conv1_;
  BatchNorm2d<S> bn1_;
  Conv2d<S> conv2_;
  BatchNorm2d<S> bn2_;
  Conv2d<S> conv3_;
  BatchNorm2d<S> bn3_;
  ReLU<S> relu1_, relu2_, relu_out_;
  std::unique_ptr<Conv2d<S>> proj_conv_;
  std::unique_ptr<BatchNorm2d<S>> proj_bn_;
};

/// Appends the 50-layer residual backbone (7x7 stem, 3-4-6-3 bottleneck
/// stages) and a fresh affine head mapping pooled features to latent_dim.
/// Head parameters are named "head.*" so external classifier weights can be
/// skipped when loading.
template <class S>
inline void build_residual50(Sequential<S>& net, std::size_t latent_dim) {
  net.template emplace<Conv2d<S>>("stem.conv", 3, 64, 7, 2, 3);
  net.template emplace<BatchNorm2d<S>>("stem.bn", 64);
  net.template emplace<ReLU<S>>();
  net.template emplace<MaxPool2d<S>>(3, 2, 1);
  const auto stage = [&](const std::string& name, std::size_t blocks, std::size_t in_ch,
                         std::size_t mid_ch, std::size_t stride) {
    for (std::size_t b = 0; b < blocks; ++b)
      net.template emplace<Bottleneck2d<S>>(name + "." + std::to_string(b),
                                            b == 0 ? in_ch : 4 * mid_ch, mid_ch,
                                            b == 0 ? stride : 1, b == 0);
  };
  stage("layer1", 3, 64, 64, 1);
  stage("layer2", 4, 256, 128, 2);
  stage("layer3", 6, 512, 256, 2);
  stage("layer4", 3, 1024, 512, 2);
  net.template emplace<GlobalAvgPool2d<S>>();
  net.template emplace<Dense<S>>("head", 2048, latent_dim);
}

}  // namespace darec::nn

#endif  // DAREC_RESNET_HPP_
