#include "anyup/upsampler.hpp"

#include <algorithm>
#include <cmath>

#include "anyup/agnostic_layer.hpp"
#include "anyup/feature_io.hpp"
#include "anyup/rng.hpp"

namespace anyup {
namespace {

constexpr int kConv = 3;
constexpr int kFuseBlocks = 1;

std::span<const double> values(const UpsamplerWeights& w, const std::string& name) { return w.params.at(name).values; }
std::span<double> values(ParamSet& g, const std::string& name) { return g.at(name).values; }

void add_conv(ParamSet& p, const std::string& prefix, int in, int out, int k) {
  p.add(prefix + ".weight", {out, k * k, in});
  p.add(prefix + ".bias", {1, 1, out});
}

void add_stem(ParamSet& p, const std::string& prefix, int in, int width, int blocks) {
  add_conv(p, prefix + ".in", in, width, kConv);
  for (int b = 0; b < blocks; ++b) {
    add_conv(p, prefix + ".block" + std::to_string(b) + ".conv1", width, width, kConv);
    add_conv(p, prefix + ".block" + std::to_string(b) + ".conv2", width, width, kConv);
  }
}

Grid conv(const UpsamplerWeights& w, const std::string& prefix, const Grid& x, int out, int k) {
  return conv2d(x, values(w, prefix + ".weight"), values(w, prefix + ".bias"), out, k);
}

void conv_backward(const UpsamplerWeights& w, ParamSet& g, const std::string& prefix, const Grid& x, int out, int k,
                   const Grid& gy, Grid* gx) {
  conv2d_backward(x, values(w, prefix + ".weight"), out, k, gy, values(g, prefix + ".weight"),
                  values(g, prefix + ".bias"), gx);
}

StemTrace stem_forward(const UpsamplerWeights& w, const std::string& prefix, Grid input, int blocks) {
  const int C = w.config.image_dim;
  StemTrace t;
  Grid a = conv(w, prefix + ".in", input, C, kConv);
  t.input = std::move(input);
  for (int b = 0; b < blocks; ++b) {
    const std::string bp = prefix + ".block" + std::to_string(b);
    BlockTrace bt;
    bt.act1 = silu(a);
    bt.hidden = conv(w, bp + ".conv1", bt.act1, C, kConv);
    bt.act2 = silu(bt.hidden);
    Grid r = conv(w, bp + ".conv2", bt.act2, C, kConv);
    bt.input = std::move(a);
    a = bt.input;
    for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += r.data[i];
    t.blocks.push_back(std::move(bt));
  }
  t.output = std::move(a);
  return t;
}

void stem_backward(const UpsamplerWeights& w, ParamSet& g, const std::string& prefix, const StemTrace& t,
                   Grid grad, Grid* grad_input) {
  const int C = w.config.image_dim;
  for (int b = int(t.blocks.size()) - 1; b >= 0; --b) {
    const std::string bp = prefix + ".block" + std::to_string(b);
    const BlockTrace& bt = t.blocks[b];
    Grid g_act2, g_act1;
    conv_backward(w, g, bp + ".conv2", bt.act2, C, kConv, grad, &g_act2);
    for (std::size_t i = 0; i < g_act2.size(); ++i) g_act2.data[i] *= silu_grad(bt.hidden.data[i]);
    conv_backward(w, g, bp + ".conv1", bt.act1, C, kConv, g_act2, &g_act1);
    for (std::size_t i = 0; i < grad.size(); ++i) grad.data[i] += g_act1.data[i] * silu_grad(bt.input.data[i]);
  }
  conv_backward(w, g, prefix + ".in", t.input, C, kConv, grad, grad_input);
}

void add_into(Grid& dst, const Grid& src) {
  if (dst.size() == 0) {
    dst = src;
    return;
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

void check_attention_inputs(const Grid& q, const Grid& k, const Grid& v, int radius) {
  require(radius >= 0, ErrorKind::Validation, "window radius must be >= 0");
  require(q.channels == k.channels, ErrorKind::Shape,
          "query dim " + std::to_string(q.channels) + " != key dim " + std::to_string(k.channels));
  require(k.height == v.height && k.width == v.width, ErrorKind::Shape, "keys and values differ in spatial extent");
  require(q.height > 0 && q.width > 0 && k.height > 0 && k.width > 0, ErrorKind::Shape, "empty attention grid");
}

// Logits for one query over its window, softmax-normalized in place.
void window_softmax(const Grid& q, const Grid& k, const AttentionWindow& win, int u, int v, std::vector<double>& a) {
  const int d = q.channels;
  const double scale = 1.0 / std::sqrt(double(d));
  const double* qv = q.data.data() + q.offset(u, v);
  a.resize(win.cells());
  double mx = -INFINITY;
  int n = 0;
  for (int y = win.y0; y < win.y1; ++y)
    for (int x = win.x0; x < win.x1; ++x, ++n) {
      const double* kv = k.data.data() + k.offset(y, x);
      double s = 0.0;
      for (int c = 0; c < d; ++c) s += qv[c] * kv[c];
      a[n] = s * scale;
      mx = std::max(mx, a[n]);
    }
  double total = 0.0;
  for (double& x : a) total += (x = std::exp(x - mx));
  for (double& x : a) x /= total;
}

}  // namespace

void UpsamplerConfig::validate() const {
  require(query_dim >= 1 && key_dim >= 1, ErrorKind::Validation, "query/key dims must be positive");
  require(query_dim == key_dim, ErrorKind::Validation, "query_dim must equal key_dim");
  require(num_res_blocks >= 1, ErrorKind::Validation, "num_res_blocks must be >= 1");
  require(window_radius >= 0, ErrorKind::Validation, "window_radius must be >= 0");
  require(pos_enc_frequencies >= 1, ErrorKind::Validation, "pos_enc_frequencies must be >= 1");
  require(agnostic_M >= 1 && agnostic_k >= 1 && agnostic_k % 2 == 1, ErrorKind::Validation,
          "agnostic layer needs M >= 1 and odd k");
  require(image_dim >= 1, ErrorKind::Validation, "image_dim must be >= 1");
}

ParamSet UpsamplerWeights::layout(const UpsamplerConfig& c) {
  c.validate();
  const int C = c.image_dim, pe = 4 * c.pos_enc_frequencies;
  ParamSet p;
  p.add("agnostic.basis", {c.agnostic_M, c.agnostic_k, c.agnostic_k});
  add_stem(p, "query.image", 3, C, c.num_res_blocks);
  add_conv(p, "query.proj", C + pe, c.query_dim, 1);
  add_stem(p, "key.image", 3, C, c.num_res_blocks);
  add_stem(p, "key.fuse", c.agnostic_M + C + pe, C, kFuseBlocks);
  add_conv(p, "key.proj", C, c.key_dim, 1);
  return p;
}

UpsamplerWeights UpsamplerWeights::initialize(const UpsamplerConfig& config) {
  UpsamplerWeights w{config, layout(config)};
  Rng rng(mix_seed(config.seed, 0x7570ULL));
  for (ParamTensor& t : w.params) {
    double bound;
    if (t.name == "agnostic.basis") {
      bound = 1.0 / config.agnostic_k;
    } else {
      // weights are (out, taps, in); biases share the fan-in of their weight
      const std::string weight_name = t.name.substr(0, t.name.rfind('.')) + ".weight";
      const auto& s = w.params.at(weight_name).shape;
      bound = 1.0 / std::sqrt(double(s[1]) * s[2]);
    }
    // parameters live on the float32 grid so checkpoints are lossless
    for (double& v : t.values) v = static_cast<float>(rng.uniform(-bound, bound));
  }
  return w;
}

void UpsamplerWeights::validate() const {
  config.validate();
  require(params.same_layout(layout(config)), ErrorKind::Validation, "weights do not match the upsampler config");
  for (const auto& t : params)
    for (double v : t.values) require(std::isfinite(v), ErrorKind::Validation, "non-finite weight in " + t.name);
}

FeatureMap positional_encoding(int h, int w, int frequencies) {
  return to_feature_map(positional_encoding_grid(h, w, frequencies));
}

AttentionWindow attention_window(int u, int v, int out_h, int out_w, int in_h, int in_w, int radius) {
  const int cy = nearest_source_index(u, in_h, out_h);
  const int cx = nearest_source_index(v, in_w, out_w);
  return {std::max(0, cy - radius), std::min(in_h, cy + radius + 1), std::max(0, cx - radius),
          std::min(in_w, cx + radius + 1)};
}

std::vector<double> attention_weights(const Grid& queries, const Grid& keys, int radius, int u, int v) {
  check_attention_inputs(queries, keys, keys, radius);
  const auto win = attention_window(u, v, queries.height, queries.width, keys.height, keys.width, radius);
  std::vector<double> a;
  window_softmax(queries, keys, win, u, v, a);
  return a;
}

Grid window_attention(const Grid& q, const Grid& k, const Grid& v, int radius) {
  check_attention_inputs(q, k, v, radius);
  Grid out(q.height, q.width, v.channels);
  std::vector<double> a;
  for (int u = 0; u < q.height; ++u)
    for (int x = 0; x < q.width; ++x) {
      const auto win = attention_window(u, x, q.height, q.width, k.height, k.width, radius);
      window_softmax(q, k, win, u, x, a);
      double* dst = out.data.data() + out.offset(u, x);
      int n = 0;
      for (int yy = win.y0; yy < win.y1; ++yy)
        for (int xx = win.x0; xx < win.x1; ++xx, ++n) {
          const double* val = v.data.data() + v.offset(yy, xx);
          for (int c = 0; c < v.channels; ++c) dst[c] += a[n] * val[c];
        }
    }
  return out;
}

FeatureMap window_attention(const FeatureMap& q, const FeatureMap& k, const FeatureMap& v, int radius) {
  return to_feature_map(window_attention(to_grid(q), to_grid(k), to_grid(v), radius));
}

void window_attention_backward(const Grid& q, const Grid& k, const Grid& v, int radius, const Grid& grad_out,
                               Grid* grad_q, Grid* grad_k, Grid* grad_v) {
  check_attention_inputs(q, k, v, radius);
  require(grad_out.height == q.height && grad_out.width == q.width && grad_out.channels == v.channels,
          ErrorKind::Shape, "attention gradient shape mismatch");
  if (grad_q && grad_q->size() == 0) *grad_q = Grid(q.height, q.width, q.channels);
  if (grad_k && grad_k->size() == 0) *grad_k = Grid(k.height, k.width, k.channels);
  if (grad_v && grad_v->size() == 0) *grad_v = Grid(v.height, v.width, v.channels);
  const int d = q.channels, c = v.channels;
  const double scale = 1.0 / std::sqrt(double(d));
  std::vector<double> a, da;
  for (int u = 0; u < q.height; ++u)
    for (int x = 0; x < q.width; ++x) {
      const auto win = attention_window(u, x, q.height, q.width, k.height, k.width, radius);
      window_softmax(q, k, win, u, x, a);
      const double* g = grad_out.data.data() + grad_out.offset(u, x);
      da.assign(a.size(), 0.0);
      double mean = 0.0;
      int n = 0;
      for (int yy = win.y0; yy < win.y1; ++yy)
        for (int xx = win.x0; xx < win.x1; ++xx, ++n) {
          const double* val = v.data.data() + v.offset(yy, xx);
          double s = 0.0;
          for (int j = 0; j < c; ++j) s += g[j] * val[j];
          da[n] = s;
          mean += a[n] * s;
          if (grad_v) {
            double* gv = grad_v->data.data() + grad_v->offset(yy, xx);
            for (int j = 0; j < c; ++j) gv[j] += a[n] * g[j];
          }
        }
      const double* qv = q.data.data() + q.offset(u, x);
      n = 0;
      for (int yy = win.y0; yy < win.y1; ++yy)
        for (int xx = win.x0; xx < win.x1; ++xx, ++n) {
          const double dl = a[n] * (da[n] - mean) * scale;
          const double* kv = k.data.data() + k.offset(yy, xx);
          if (grad_q) {
            double* gq = grad_q->data.data() + grad_q->offset(u, x);
            for (int j = 0; j < d; ++j) gq[j] += dl * kv[j];
          }
          if (grad_k) {
            double* gk = grad_k->data.data() + grad_k->offset(yy, xx);
            for (int j = 0; j < d; ++j) gk[j] += dl * qv[j];
          }
        }
    }
}

FeatureMap encode_queries(const GuidanceImage& image, const UpsamplerWeights& weights) {
  const auto& c = weights.config;
  require(image.channels == 3 && image.height > 0 && image.width > 0, ErrorKind::Shape, "queries need an HxWx3 image");
  StemTrace stem = stem_forward(weights, "query.image", to_grid(image), c.num_res_blocks);
  Grid cat = concat_channels(stem.output, positional_encoding_grid(image.height, image.width, c.pos_enc_frequencies));
  return to_feature_map(conv(weights, "query.proj", cat, c.query_dim, 1));
}

namespace {

Grid keys_forward(const UpsamplerWeights& weights, const Grid& image_lr, const Grid& features, ForwardPass* pass) {
  const auto& c = weights.config;
  require(image_lr.height == features.height && image_lr.width == features.width, ErrorKind::Shape,
          "low-res image " + image_lr.shape_string() + " does not match features " + features.shape_string());
  Grid agn = agnostic_conv(features, values(weights, "agnostic.basis"), c.agnostic_M, c.agnostic_k);
  StemTrace stem = stem_forward(weights, "key.image", image_lr, c.num_res_blocks);
  Grid key_concat =
      concat_channels(stem.output, positional_encoding_grid(features.height, features.width, c.pos_enc_frequencies));
  Grid fuse_input = concat_channels(agn, key_concat);
  StemTrace fuse = stem_forward(weights, "key.fuse", fuse_input, kFuseBlocks);
  Grid keys = conv(weights, "key.proj", fuse.output, c.key_dim, 1);
  if (pass) {
    pass->agnostic = std::move(agn);
    pass->key_stem = std::move(stem);
    pass->key_concat = std::move(key_concat);
    pass->fuse_input = std::move(fuse_input);
    pass->fuse_stem = std::move(fuse);
  }
  return keys;
}

}  // namespace

FeatureMap encode_keys(const GuidanceImage& image_lr, const FeatureMap& features, const UpsamplerWeights& weights) {
  require(image_lr.channels == 3, ErrorKind::Shape, "keys need an RGB low-res image");
  return to_feature_map(keys_forward(weights, to_grid(image_lr), to_grid(features), nullptr));
}

ForwardPass forward(const UpsamplerWeights& weights, const GuidanceImage& image, const Grid& features,
                    std::span<const std::pair<int, int>> output_sizes) {
  const auto& c = weights.config;
  require(image.channels == 3 && image.height > 0 && image.width > 0, ErrorKind::Shape, "guidance must be HxWx3");
  require(features.height > 0 && features.width > 0 && features.channels > 0, ErrorKind::Shape,
          "features must be non-empty");
  ForwardPass pass;
  pass.features = features;
  pass.query_stem = stem_forward(weights, "query.image", to_grid(image), c.num_res_blocks);
  pass.query_concat = concat_channels(pass.query_stem.output,
                                      positional_encoding_grid(image.height, image.width, c.pos_enc_frequencies));
  pass.queries = conv(weights, "query.proj", pass.query_concat, c.query_dim, 1);

  const Grid image_lr = to_grid(resize_bilinear(image, features.height, features.width));
  pass.keys = keys_forward(weights, image_lr, features, &pass);

  for (auto [h, w] : output_sizes) {
    require(h >= 1 && w >= 1, ErrorKind::Shape, "output grid must be at least 1x1");
    pass.output_sizes.emplace_back(h, w);
    pass.pooled_queries.push_back(resize_area(pass.queries, h, w));
    pass.outputs.push_back(window_attention(pass.pooled_queries.back(), pass.keys, features, c.window_radius));
  }
  return pass;
}

void backward(const UpsamplerWeights& weights, const ForwardPass& pass, std::span<const Grid> grad_outputs,
              ParamSet& grads) {
  const auto& c = weights.config;
  require(grad_outputs.size() == pass.outputs.size(), ErrorKind::Shape, "one gradient per output expected");
  require(grads.same_layout(weights.params), ErrorKind::Shape, "gradient buffers do not match weights");

  Grid grad_queries, grad_keys;
  for (std::size_t o = 0; o < grad_outputs.size(); ++o) {
    if (grad_outputs[o].size() == 0) continue;
    Grid gq;
    window_attention_backward(pass.pooled_queries[o], pass.keys, pass.features, c.window_radius, grad_outputs[o], &gq,
                              &grad_keys, nullptr);
    add_into(grad_queries, resize_area_adjoint(gq, pass.queries.height, pass.queries.width));
  }

  if (grad_queries.size() != 0) {
    Grid g_concat, g_stem;
    conv_backward(weights, grads, "query.proj", pass.query_concat, c.query_dim, 1, grad_queries, &g_concat);
    split_channels(g_concat, c.image_dim, &g_stem, nullptr);
    stem_backward(weights, grads, "query.image", pass.query_stem, std::move(g_stem), nullptr);
  }

  if (grad_keys.size() != 0) {
    Grid g_fuse_out, g_fuse_in, g_agn, g_key_concat, g_key_stem;
    conv_backward(weights, grads, "key.proj", pass.fuse_stem.output, c.key_dim, 1, grad_keys, &g_fuse_out);
    stem_backward(weights, grads, "key.fuse", pass.fuse_stem, std::move(g_fuse_out), &g_fuse_in);
    split_channels(g_fuse_in, c.agnostic_M, &g_agn, &g_key_concat);
    agnostic_conv_backward(pass.features, values(weights, "agnostic.basis"), c.agnostic_M, c.agnostic_k, g_agn,
                           values(grads, "agnostic.basis"));
    split_channels(g_key_concat, c.image_dim, &g_key_stem, nullptr);
    stem_backward(weights, grads, "key.image", pass.key_stem, std::move(g_key_stem), nullptr);
  }
}

FeatureMap upsample(const UpsamplerWeights& weights, const GuidanceImage& image, const FeatureMap& features) {
  return upsample(weights, image, features, image.height, image.width);
}

FeatureMap upsample(const UpsamplerWeights& weights, const GuidanceImage& image, const FeatureMap& features,
                    int out_h, int out_w) {
  features.validate();
  const std::pair<int, int> size{out_h, out_w};
  ForwardPass pass = forward(weights, image, to_grid(features), std::span(&size, 1));
  return to_feature_map(pass.outputs.front());
}

}  // namespace anyup
