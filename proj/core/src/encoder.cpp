#include "latentcsi/encoder.hpp"

#include <algorithm>
#include <json.hpp>

#include "latentcsi/error.hpp"

namespace latentcsi {

using nlohmann::json;

namespace {
std::string block(int k) { return "up" + std::to_string(k); }
}  // namespace

int ModelSpec::channels(int k) const { return std::max(b >> (k - 1), min_channels); }

ModelSpec model_spec(const EncoderConfig& cfg) {
  ModelSpec m;
  m.kind = ModelSpec::Kind::kEncoder;
  m.s = cfg.s;
  m.b = cfg.b;
  m.steps = cfg.d;
  m.init_spatial = cfg.init_spatial;
  m.out_channels = cfg.latent_channels;
  m.min_channels = 1;
  m.attention_blocks = cfg.attention_blocks;
  m.ctx_tokens = cfg.ctx_tokens;
  m.ctx_dim = cfg.ctx_dim;
  m.kernel = cfg.kernel;
  m.clamp_output = false;
  if (cfg.d >= 1 && (cfg.b >> cfg.d) < 1) {
    throw InvalidArgument("encoder: b=" + std::to_string(cfg.b) + " halves below 1 channel in " +
                          std::to_string(cfg.d) + " steps");
  }
  validate(m);
  return m;
}

ModelSpec model_spec(const BaselineConfig& cfg) {
  if (cfg.image_width != cfg.image_height) {
    throw InvalidArgument("baseline: image must be square");
  }
  if (cfg.upsample_steps < 1) throw InvalidArgument("baseline: upsample_steps must be >= 1");
  const int init = cfg.image_width >> cfg.upsample_steps;
  if (init < 1 || (init << cfg.upsample_steps) != cfg.image_width) {
    throw InvalidArgument("baseline: image size " + std::to_string(cfg.image_width) +
                          " is not a multiple of 2^upsample_steps");
  }
  ModelSpec m;
  m.kind = ModelSpec::Kind::kBaseline;
  m.s = cfg.s;
  m.b = cfg.b;
  m.steps = cfg.upsample_steps;
  m.init_spatial = init;
  m.out_channels = 3;
  m.min_channels = cfg.min_channels;
  m.attention_blocks = cfg.attention_blocks;
  m.ctx_tokens = cfg.ctx_tokens;
  m.ctx_dim = cfg.ctx_dim;
  m.kernel = cfg.kernel;
  m.clamp_output = true;
  validate(m);
  return m;
}

void validate(const ModelSpec& m) {
  if (m.s < 1) throw InvalidArgument("model: s must be >= 1");
  if (m.b < 1) throw InvalidArgument("model: b must be >= 1");
  if (m.steps < 0) throw InvalidArgument("model: steps must be >= 0");
  if (m.init_spatial < 1) throw InvalidArgument("model: init_spatial must be >= 1");
  if (m.out_channels < 1) throw InvalidArgument("model: out_channels must be >= 1");
  if (m.min_channels < 1) throw InvalidArgument("model: min_channels must be >= 1");
  if (m.ctx_tokens < 1) throw InvalidArgument("model: ctx_tokens must be >= 1");
  if (m.ctx_dim < 1) throw InvalidArgument("model: ctx_dim must be >= 1");
  if (m.kernel < 1 || m.kernel % 2 == 0) throw InvalidArgument("model: kernel must be odd");
  for (int k : m.attention_blocks) {
    if (k < 1 || k > m.steps) {
      throw InvalidArgument("model: attention block " + std::to_string(k) + " outside 1.." +
                            std::to_string(m.steps));
    }
  }
}

std::string spec_json(const ModelSpec& m) {
  json j = {{"kind", m.kind == ModelSpec::Kind::kEncoder ? "encoder" : "baseline"},
            {"s", m.s},
            {"b", m.b},
            {"steps", m.steps},
            {"init_spatial", m.init_spatial},
            {"out_channels", m.out_channels},
            {"min_channels", m.min_channels},
            {"attention_blocks", std::vector<int>(m.attention_blocks.begin(), m.attention_blocks.end())},
            {"ctx_tokens", m.ctx_tokens},
            {"ctx_dim", m.ctx_dim},
            {"kernel", m.kernel},
            {"clamp_output", m.clamp_output}};
  return j.dump();
}

ModelSpec spec_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    ModelSpec m;
    const std::string kind = j.at("kind");
    if (kind == "encoder") {
      m.kind = ModelSpec::Kind::kEncoder;
    } else if (kind == "baseline") {
      m.kind = ModelSpec::Kind::kBaseline;
    } else {
      throw ParseError("model spec: unknown kind '" + kind + "'");
    }
    m.s = j.at("s");
    m.b = j.at("b");
    m.steps = j.at("steps");
    m.init_spatial = j.at("init_spatial");
    m.out_channels = j.at("out_channels");
    m.min_channels = j.at("min_channels");
    for (int k : j.at("attention_blocks")) m.attention_blocks.insert(k);
    m.ctx_tokens = j.at("ctx_tokens");
    m.ctx_dim = j.at("ctx_dim");
    m.kernel = j.at("kernel");
    m.clamp_output = j.at("clamp_output");
    validate(m);
    return m;
  } catch (const json::exception& e) {
    throw ParseError(std::string("model spec: ") + e.what());
  }
}

nn::ParamLayout model_layout(const ModelSpec& m) {
  validate(m);
  nn::ParamLayout l;
  const int sp = m.init_spatial * m.init_spatial;
  if (m.steps == 0) {
    l.linear("fc", m.s, m.out_channels * sp);
    return l;
  }
  l.linear("fc", m.s, m.channels(1) * sp);
  const int me = m.ctx_tokens * m.ctx_dim;
  for (int k = 1; k <= m.steps; ++k) {
    const std::string p = block(k);
    const int c = m.channels(k), c_next = m.channels(k + 1);
    l.resblock(p + ".res1", c, m.kernel);
    l.resblock(p + ".res2", c, m.kernel);
    if (m.attention_blocks.count(k)) {
      l.group_norm(p + ".attn.norm", c);
      l.conv(p + ".attn.to_q", c, m.ctx_dim, 1);
      l.linear(p + ".attn.to_k", m.s, me);
      l.linear(p + ".attn.to_v", m.s, me);
      l.conv(p + ".attn.to_out", m.ctx_dim, c, 1);
    }
    l.conv_transpose(p + ".upsample", c, c_next, 4, 2);
  }
  const int c_last = m.channels(m.steps + 1);
  l.add("final_conv.weight", {m.out_channels, c_last, m.kernel, m.kernel}, nn::Init::kFanIn,
        c_last * m.kernel * m.kernel);
  // The clamped head starts at mid-gray rather than on the clamp boundary.
  if (m.clamp_output) {
    l.add("final_conv.bias", {m.out_channels}, nn::Init::kConstant, 1, 0.5f);
  } else {
    l.add("final_conv.bias", {m.out_channels}, nn::Init::kZeros);
  }
  return l;
}

EncoderWeights build_model(const ModelSpec& spec, std::uint64_t seed) {
  return model_layout(spec).materialize(seed);
}
EncoderWeights build_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  return build_model(model_spec(cfg), seed);
}
EncoderWeights build_baseline(const BaselineConfig& cfg, std::uint64_t seed) {
  return build_model(model_spec(cfg), seed);
}

std::size_t param_count(const ModelSpec& spec) { return model_layout(spec).scalar_count(); }
std::size_t param_count(const EncoderConfig& cfg) { return param_count(model_spec(cfg)); }
std::size_t param_count(const BaselineConfig& cfg) { return param_count(model_spec(cfg)); }

template <class T>
nn::Var model_forward(nn::Binder<T>& b, const ModelSpec& m, nn::Var x) {
  auto& t = b.tape();
  const nn::Shape xs = t.shape(x);
  if (xs.size() != 2 || xs[1] != m.s) {
    throw ShapeError("model: expected input [N," + std::to_string(m.s) + "], got " +
                     nn::shape_str(xs));
  }
  const int n = xs[0];
  const int sp = m.init_spatial;
  if (m.steps == 0) {
    nn::Var h = t.reshape(nn::linear(b, "fc", x), {n, m.out_channels, sp, sp});
    return m.clamp_output ? t.clamp01(h) : h;
  }
  nn::Var h = t.reshape(nn::linear(b, "fc", x), {n, m.channels(1), sp, sp});
  for (int k = 1; k <= m.steps; ++k) {
    const std::string p = block(k);
    h = nn::resblock(b, p + ".res1", h);
    h = nn::resblock(b, p + ".res2", h);
    if (m.attention_blocks.count(k)) {
      nn::Var keys = t.reshape(nn::linear(b, p + ".attn.to_k", x), {n, m.ctx_tokens, m.ctx_dim});
      nn::Var vals = t.reshape(nn::linear(b, p + ".attn.to_v", x), {n, m.ctx_tokens, m.ctx_dim});
      h = nn::cross_attention(b, p + ".attn", h, keys, vals);
    }
    h = nn::conv_transpose(b, p + ".upsample", h, 2, 1);
  }
  h = nn::conv(b, "final_conv", h, 1, m.kernel / 2);
  return m.clamp_output ? t.clamp01(h) : h;
}

template nn::Var model_forward<float>(nn::Binder<float>&, const ModelSpec&, nn::Var);
template nn::Var model_forward<double>(nn::Binder<double>&, const ModelSpec&, nn::Var);

std::vector<float> forward_batch(const EncoderWeights& w, const ModelSpec& spec,
                                 const std::vector<float>& x, int n) {
  if (x.size() != static_cast<std::size_t>(n) * spec.s) {
    throw ShapeError("forward: expected " + std::to_string(n) + "x" + std::to_string(spec.s) +
                     " inputs, got " + std::to_string(x.size()) + " values");
  }
  nn::Tape<float> t(false);
  nn::Binder<float> b(t, w);
  nn::Var y = model_forward(b, spec, t.constant({n, spec.s}, x));
  return t.take_value(y);
}

LatentTensor forward(const EncoderWeights& w, const ModelSpec& spec, const AmplitudeVector& x) {
  if (x.values.size() != static_cast<std::size_t>(spec.s)) {
    throw ShapeError("forward: input has " + std::to_string(x.values.size()) +
                     " subcarriers, model expects " + std::to_string(spec.s));
  }
  LatentTensor out(spec.out_channels, spec.out_size(), spec.out_size());
  out.data = forward_batch(w, spec, x.values, 1);
  return out;
}

LatentTensor forward(const EncoderWeights& w, const EncoderConfig& cfg, const AmplitudeVector& x) {
  return forward(w, model_spec(cfg), x);
}

RgbImage forward_image(const EncoderWeights& w, const BaselineConfig& cfg,
                       const AmplitudeVector& x) {
  const LatentTensor y = forward(w, model_spec(cfg), x);
  return from_planar(y.data.data(), y.width, y.height);
}

EncoderConfig full_encoder_config(int s) {
  EncoderConfig c;
  c.s = s;
  c.b = 256;
  c.d = 4;
  c.latent_channels = 4;
  c.attention_blocks = {2, 3, 4};
  return c;
}

BaselineConfig full_baseline_config(int s, int b) {
  BaselineConfig c;
  c.s = s;
  c.b = b;
  c.image_width = c.image_height = 512;
  c.upsample_steps = 4;
  c.attention_blocks = {2, 3, 4};
  return c;
}

EncoderConfig desk_encoder_config(int s) {
  EncoderConfig c;
  c.s = s;
  c.b = 64;
  c.d = 1;
  c.latent_channels = 4;
  c.attention_blocks = {1};
  c.ctx_tokens = 8;
  c.ctx_dim = 32;
  return c;
}

BaselineConfig desk_baseline_config(int s) {
  BaselineConfig c;
  c.s = s;
  c.b = 64;
  c.image_width = c.image_height = 64;
  c.upsample_steps = 4;
  c.attention_blocks = {1};
  c.ctx_tokens = 8;
  c.ctx_dim = 32;
  return c;
}

}  // namespace latentcsi
