#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "deepcox/autodiff.hpp"
#include "deepcox/cohort.hpp"
#include "deepcox/rng.hpp"

namespace deepcox {

// Architecture: code+type embeddings with a delta-t column, three stacked
// bidirectional GRU layers with inter-layer dropout, dot-product attention
// over the outputs, then predictor concatenation and a size-preserving ELU
// layer down to the scalar log relative risk.  Hidden size equals the layer
// input size of the first layer (E+1) throughout.
struct NetConfig {
  int embed_dim = 16;
  int gru_layers = 3;
  double dropout_rate = 0.10;
  int predictor_dim = static_cast<int>(kPredictorDim);
  std::uint64_t seed = 1;

  int hidden() const { return embed_dim + 1; }
};

struct GruDirParams {
  ad::Param Wz, Wr, Wn;  // input_size x H
  ad::Param Uz, Ur, Un;  // H x H
  ad::Param bz, br, bn, bhn;  // 1 x H
};

struct NetParams {
  NetConfig config;
  std::size_t vocab_rows = 1;  // retained codes + padding row 0
  ad::Param code_emb;          // vocab_rows x E
  ad::Param kind_emb;          // 5 x E
  std::vector<std::array<GruDirParams, 2>> layers;  // [layer][fw=0,bw=1]
  ad::Param attn_q;   // 2H x 1
  ad::Param head_w1;  // (2H+P) x (2H+P)
  ad::Param head_b1;  // 1 x (2H+P)
  ad::Param head_w2;  // (2H+P) x 1
  ad::Param head_b2;  // 1 x 1

  // fan_in drives the init bound; 0 marks bias-like tensors initialised to 0
  template <typename Fn>
  void for_each(Fn&& fn) {
    fn(code_emb, config.embed_dim);
    fn(kind_emb, config.embed_dim);
    for (auto& layer : layers) {
      for (auto& dir : layer) {
        const int in = static_cast<int>(dir.Wz.value.rows);
        const int h = static_cast<int>(dir.Uz.value.rows);
        fn(dir.Wz, in);
        fn(dir.Wr, in);
        fn(dir.Wn, in);
        fn(dir.Uz, h);
        fn(dir.Ur, h);
        fn(dir.Un, h);
        fn(dir.bz, 0);
        fn(dir.br, 0);
        fn(dir.bn, 0);
        fn(dir.bhn, 0);
      }
    }
    fn(attn_q, 2 * config.hidden());
    fn(head_w1, 2 * config.hidden() + config.predictor_dim);
    fn(head_b1, 0);
    fn(head_w2, 2 * config.hidden() + config.predictor_dim);
    fn(head_b2, 0);
  }

  template <typename Fn>
  void for_each(Fn&& fn) const {
    const_cast<NetParams*>(this)->for_each(
        [&](ad::Param& p, int fan_in) { fn(const_cast<const ad::Param&>(p), fan_in); });
  }
};

namespace detail {

inline void shape_params(NetParams& net) {
  const int e = net.config.embed_dim;
  const int h = net.config.hidden();
  const int p = net.config.predictor_dim;
  auto mk = [](ad::Param& prm, const char* name, std::size_t r, std::size_t c) {
    prm.name = name;
    prm.value = ad::Tensor(r, c);
  };
  mk(net.code_emb, "code_emb", net.vocab_rows, e);
  mk(net.kind_emb, "kind_emb", 5, e);
  net.layers.resize(net.config.gru_layers);
  for (int l = 0; l < net.config.gru_layers; ++l) {
    const int in = l == 0 ? e + 1 : 2 * h;
    for (int d = 0; d < 2; ++d) {
      GruDirParams& g = net.layers[l][d];
      const std::string tag =
          "gru" + std::to_string(l) + (d == 0 ? "_fw_" : "_bw_");
      mk(g.Wz, (tag + "Wz").c_str(), in, h);
      mk(g.Wr, (tag + "Wr").c_str(), in, h);
      mk(g.Wn, (tag + "Wn").c_str(), in, h);
      mk(g.Uz, (tag + "Uz").c_str(), h, h);
      mk(g.Ur, (tag + "Ur").c_str(), h, h);
      mk(g.Un, (tag + "Un").c_str(), h, h);
      mk(g.bz, (tag + "bz").c_str(), 1, h);
      mk(g.br, (tag + "br").c_str(), 1, h);
      mk(g.bn, (tag + "bn").c_str(), 1, h);
      mk(g.bhn, (tag + "bhn").c_str(), 1, h);
    }
  }
  mk(net.attn_q, "attn_q", 2 * h, 1);
  mk(net.head_w1, "head_w1", 2 * h + p, 2 * h + p);
  mk(net.head_b1, "head_b1", 1, 2 * h + p);
  mk(net.head_w2, "head_w2", 2 * h + p, 1);
  mk(net.head_b2, "head_b2", 1, 1);
}

}  // namespace detail

// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases, zero
// padding embedding row; bit-identical for a given seed.
inline NetParams init_params(const NetConfig& config, std::size_t vocab_size) {
  if (config.embed_dim < 1 || config.gru_layers < 1 ||
      config.dropout_rate < 0 || config.dropout_rate >= 1)
    throw std::invalid_argument("init_params: bad config");
  NetParams net;
  net.config = config;
  net.vocab_rows = vocab_size + 1;
  detail::shape_params(net);
  Rng rng = Rng(config.seed).stream(0xA11CE);
  net.for_each([&](ad::Param& p, int fan_in) {
    if (fan_in <= 0) return;  // biases stay zero
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : p.value.data) v = rng.uniform(-bound, bound);
  });
  for (int j = 0; j < config.embed_dim; ++j) net.code_emb.value.at(0, j) = 0.0;
  return net;
}

// Row i of the input matrix: code embedding + type embedding, with delta-t
// appended as a scalar column.
inline ad::Value embed_sequence(ad::Tape& tape, NetParams& net,
                                const CodeSequence& seq) {
  const std::size_t len = seq.length();
  ad::Value code_rows = tape.gather(net.code_emb, seq.token_ids);
  ad::Value kind_rows = tape.gather(net.kind_emb, seq.kind_ids);
  ad::Value summed = tape.add(code_rows, kind_rows);
  ad::Tensor dt(len, 1);
  for (std::size_t i = 0; i < len; ++i)
    dt.at(i, 0) = static_cast<double>(seq.delta_t_months[i]);
  return tape.concat({summed, tape.leaf(std::move(dt))}, 1);
}

// Standard GRU recurrence with the reset gate applied to the recurrent term;
// the backward direction consumes the reversed sequence and its outputs are
// re-reversed so row t always describes event t.
inline ad::Value gru_forward(ad::Tape& tape, ad::Value inputs,
                             GruDirParams& prm, bool reverse) {
  const std::size_t len = tape.value(inputs).rows;
  const std::size_t h = prm.Uz.value.rows;
  if (tape.value(inputs).cols != prm.Wz.value.rows)
    throw std::runtime_error("gru_forward: input width mismatch");

  // input projections for the whole sequence at once
  ad::Value xz = tape.add(tape.matmul(inputs, tape.param(prm.Wz)),
                          tape.param(prm.bz));
  ad::Value xr = tape.add(tape.matmul(inputs, tape.param(prm.Wr)),
                          tape.param(prm.br));
  ad::Value xn = tape.add(tape.matmul(inputs, tape.param(prm.Wn)),
                          tape.param(prm.bn));

  ad::Value hidden = tape.leaf(ad::Tensor(1, h));
  std::vector<ad::Value> outputs(len);
  for (std::size_t step = 0; step < len; ++step) {
    const std::size_t t = reverse ? len - 1 - step : step;
    ad::Value z = tape.sigmoid(
        tape.add(tape.row(xz, t), tape.matmul(hidden, tape.param(prm.Uz))));
    ad::Value r = tape.sigmoid(
        tape.add(tape.row(xr, t), tape.matmul(hidden, tape.param(prm.Ur))));
    ad::Value rec = tape.add(tape.matmul(hidden, tape.param(prm.Un)),
                             tape.param(prm.bhn));
    ad::Value n = tape.tanh(tape.add(tape.row(xn, t), tape.mul(r, rec)));
    hidden = tape.add(tape.mul(tape.affine(z, -1.0, 1.0), n),
                      tape.mul(z, hidden));
    outputs[t] = hidden;
  }
  return tape.concat(outputs, 0);
}

// Dot-product attention with a learned query: weights are the softmax of
// output-query inner products; an empty sequence pools to a zero context.
inline std::pair<ad::Value, ad::Value> attention_pool(ad::Tape& tape,
                                                      ad::Value outputs,
                                                      ad::Param& query) {
  const std::size_t len = tape.value(outputs).rows;
  if (len == 0) {
    return {tape.leaf(ad::Tensor(1, query.value.rows)),
            tape.leaf(ad::Tensor(0, 1))};
  }
  ad::Value scores = tape.matmul(outputs, tape.param(query));  // L x 1
  ad::Value alpha = tape.softmax(scores, 0);
  ad::Value context = tape.matmul(alpha, outputs, true, false);  // 1 x 2H
  return {context, alpha};
}

struct ForwardResult {
  ad::Value g;          // 1x1 log relative risk
  ad::Value attention;  // Lx1 weights (0x1 for empty histories)
};

inline ForwardResult net_forward(ad::Tape& tape, NetParams& net,
                                 const CodeSequence& seq,
                                 const PredictorVector& predictors,
                                 bool train_mode, Rng* rng = nullptr) {
  if (static_cast<int>(predictors.size()) != net.config.predictor_dim)
    throw std::runtime_error("net_forward: predictor length mismatch");
  const int h = net.config.hidden();
  ad::Value context = tape.leaf(ad::Tensor(1, 2 * h));
  ad::Value alpha = tape.leaf(ad::Tensor(0, 1));
  if (seq.length() > 0) {
    ad::Value x = embed_sequence(tape, net, seq);
    for (int l = 0; l < net.config.gru_layers; ++l) {
      ad::Value fw = gru_forward(tape, x, net.layers[l][0], false);
      ad::Value bw = gru_forward(tape, x, net.layers[l][1], true);
      x = tape.concat({fw, bw}, 1);
      const bool inter_layer = l + 1 < net.config.gru_layers;
      if (inter_layer && train_mode && net.config.dropout_rate > 0) {
        if (!rng)
          throw std::runtime_error("net_forward: train mode needs an rng");
        x = tape.dropout(x, net.config.dropout_rate, true, *rng);
      }
    }
    auto pooled = attention_pool(tape, x, net.attn_q);
    context = pooled.first;
    alpha = pooled.second;
  }
  ad::Value feat =
      tape.concat({context, tape.leaf(ad::Tensor::row(predictors))}, 1);
  ad::Value h1 = tape.elu(tape.add(tape.matmul(feat, tape.param(net.head_w1)),
                                   tape.param(net.head_b1)));
  ad::Value g = tape.add(tape.matmul(h1, tape.param(net.head_w2)),
                         tape.param(net.head_b2));
  return {g, alpha};
}

// Eval-mode scalar prediction.
inline double net_predict(NetParams& net, const CodeSequence& seq,
                          const PredictorVector& predictors) {
  ad::Tape tape;
  ForwardResult r = net_forward(tape, net, seq, predictors, false);
  return tape.value(r.g).data[0];
}

// Checkpoint format: a JSON object with the config echo and one named flat
// array per parameter.  Doubles round-trip bitwise through the serializer.
inline nlohmann::ordered_json params_to_json(const NetParams& net) {
  nlohmann::ordered_json j;
  j["format"] = "deepcox-net-params-v1";
  j["config"] = {{"embed_dim", net.config.embed_dim},
                 {"gru_layers", net.config.gru_layers},
                 {"dropout_rate", net.config.dropout_rate},
                 {"predictor_dim", net.config.predictor_dim},
                 {"seed", net.config.seed}};
  j["vocab_rows"] = net.vocab_rows;
  nlohmann::ordered_json params = nlohmann::ordered_json::object();
  net.for_each([&](const ad::Param& p, int) {
    params[p.name] = {{"rows", p.value.rows},
                      {"cols", p.value.cols},
                      {"data", p.value.data}};
  });
  j["params"] = std::move(params);
  return j;
}

inline NetParams params_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != std::string("deepcox-net-params-v1"))
    throw std::runtime_error("checkpoint: unknown format");
  NetConfig cfg;
  cfg.embed_dim = j.at("config").at("embed_dim").get<int>();
  cfg.gru_layers = j.at("config").at("gru_layers").get<int>();
  cfg.dropout_rate = j.at("config").at("dropout_rate").get<double>();
  cfg.predictor_dim = j.at("config").at("predictor_dim").get<int>();
  cfg.seed = j.at("config").at("seed").get<std::uint64_t>();
  NetParams net;
  net.config = cfg;
  net.vocab_rows = j.at("vocab_rows").get<std::size_t>();
  detail::shape_params(net);
  net.for_each([&](ad::Param& p, int) {
    const auto& pj = j.at("params").at(p.name);
    if (pj.at("rows").get<std::size_t>() != p.value.rows ||
        pj.at("cols").get<std::size_t>() != p.value.cols)
      throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
    p.value.data = pj.at("data").get<std::vector<double>>();
  });
  return net;
}

inline void save_params(const NetParams& net, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out << params_to_json(net).dump() << "\n";
}

inline NetParams load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  nlohmann::json j;
  in >> j;
  return params_from_json(j);
}

}  // namespace deepcox
