#pragma once

#include <fstream>
#include <json.hpp>

#include "nn.hpp"

namespace semdefect::net {

using nlohmann::json;
using nn::Graph;
using nn::Param;

struct NetConfig {
  int depth = 4;
  int base_channels = 32;
  int embed_dim = 64;
  int in_channels = 1;   // 2 in ref-def mode
  int gn_groups = 8;
  bool embed_from_low = false;  // attach projection head to low-res features

  int divisor() const { return 1 << (depth - 1); }

  void validate() const {
    if (depth < 2) throw ConfigError("NetConfig: depth >= 2 required");
    if (base_channels < 8) throw ConfigError("NetConfig: base_channels >= 8 required");
    if (embed_dim < 1) throw ConfigError("NetConfig: embed_dim >= 1 required");
    if (in_channels < 1 || in_channels > 2)
      throw ConfigError("NetConfig: in_channels must be 1 or 2");
    if (gn_groups < 1) throw ConfigError("NetConfig: gn_groups >= 1 required");
  }
};

inline json to_json(const NetConfig& c) {
  return json{{"depth", c.depth},         {"base_channels", c.base_channels},
              {"embed_dim", c.embed_dim}, {"in_channels", c.in_channels},
              {"gn_groups", c.gn_groups}, {"embed_from_low", c.embed_from_low}};
}

inline NetConfig net_config_from_json(const json& j) {
  NetConfig c;
  c.depth = j.value("depth", c.depth);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.gn_groups = j.value("gn_groups", c.gn_groups);
  c.embed_from_low = j.value("embed_from_low", c.embed_from_low);
  return c;
}

// Node ids of one forward pass.
struct ForwardOutput {
  int low_feats = -1;   // (B, C_low, H/2^(depth-1), W/2^(depth-1))
  int high_feats = -1;  // (B, base_channels, H, W)
  int logits = -1;      // (B, 1, H, W)
  int prob_map = -1;    // (B, 1, H, W), strictly in (0,1)
};

// U-net encoder-decoder with a sigmoid segmentation head and a 1x1
// projection head for the dense contrastive loss. All normalization is
// per-sample, so inference is batch-composition invariant.
class UNet {
public:
  UNet(NetConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    auto rng = make_rng(seed, 0x756e6574);

    int in_ch = cfg_.in_channels;
    for (int i = 0; i < cfg_.depth; ++i) {
      int out_ch = cfg_.base_channels << i;
      enc_.push_back(make_block("enc" + std::to_string(i), in_ch, out_ch, rng));
      in_ch = out_ch;
    }
    for (int i = cfg_.depth - 2; i >= 0; --i) {
      int skip_ch = cfg_.base_channels << i;
      int up_ch = cfg_.base_channels << (i + 1);
      dec_.push_back(make_block("dec" + std::to_string(i), up_ch + skip_ch, skip_ch, rng));
    }

    int proj_in = cfg_.embed_from_low ? cfg_.base_channels << (cfg_.depth - 1)
                                      : cfg_.base_channels;
    init_conv(seg_w_, seg_b_, "seg_head", 1, cfg_.base_channels, 1, rng);
    init_conv(proj_w_, proj_b_, "proj_head", cfg_.embed_dim, proj_in, 1, rng);
  }

  const NetConfig& config() const { return cfg_; }

  ForwardOutput forward(Graph& g, const Tensor& x) {
    if (x.c != cfg_.in_channels)
      throw ShapeError("forward: expected " + std::to_string(cfg_.in_channels) +
                       " input channels, got " + std::to_string(x.c));
    int div = cfg_.divisor();
    if (x.h % div != 0 || x.w % div != 0)
      throw ShapeError("forward: input height and width must be divisible by " +
                       std::to_string(div) + " for depth " + std::to_string(cfg_.depth));
    for (double v : x.v)
      if (!(v >= 0.0 && v <= 1.0))
        throw ParameterError("forward: input values must lie in [0,1]");

    int cur = nn::input(g, x);
    std::vector<int> skips;
    for (int i = 0; i < cfg_.depth; ++i) {
      cur = run_block(g, enc_[i], cur);
      if (i < cfg_.depth - 1) {
        skips.push_back(cur);
        cur = nn::maxpool2(g, cur);
      }
    }
    ForwardOutput out;
    out.low_feats = cur;
    for (int i = cfg_.depth - 2; i >= 0; --i) {
      int up = nn::upsample2(g, cur);
      cur = run_block(g, dec_[cfg_.depth - 2 - i], nn::concat_channels(g, up, skips[i]));
    }
    out.high_feats = cur;
    out.logits = nn::conv2d(g, cur, seg_w_, seg_b_);
    out.prob_map = nn::sigmoid(g, out.logits);
    return out;
  }

  // Per-pixel linear projection of the unsupervised features.
  int project(Graph& g, const ForwardOutput& fwd) {
    int src = cfg_.embed_from_low ? fwd.low_feats : fwd.high_feats;
    return nn::conv2d(g, src, proj_w_, proj_b_);
  }

  std::vector<Param*> params() {
    std::vector<Param*> ps;
    auto add_block = [&ps](Block& b) {
      ps.push_back(&b.w1); ps.push_back(&b.b1); ps.push_back(&b.gn1_g); ps.push_back(&b.gn1_b);
      ps.push_back(&b.w2); ps.push_back(&b.b2); ps.push_back(&b.gn2_g); ps.push_back(&b.gn2_b);
    };
    for (auto& b : enc_) add_block(b);
    for (auto& b : dec_) add_block(b);
    ps.push_back(&seg_w_); ps.push_back(&seg_b_);
    ps.push_back(&proj_w_); ps.push_back(&proj_b_);
    return ps;
  }

  void zero_grad() {
    for (Param* p : params()) p->zero_grad();
  }

  // Self-describing checkpoint: JSON header (config + tensor index) followed
  // by raw little-endian doubles.
  void save(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw EnvironmentError("UNet::save: cannot open " + path);
    json header{{"format", "semdefect-checkpoint"}, {"version", 1},
                {"config", to_json(cfg_)}};
    json tensors = json::array();
    for (Param* p : params())
      tensors.push_back(json{{"name", p->name},
                             {"shape", {p->value.n, p->value.c, p->value.h, p->value.w}}});
    header["tensors"] = std::move(tensors);
    std::string hs = header.dump();
    uint64_t len = hs.size();
    out.write("SDCKPT01", 8);
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (Param* p : params())
      out.write(reinterpret_cast<const char*>(p->value.v.data()),
                static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    if (!out) throw EnvironmentError("UNet::save: write failed for " + path);
  }

  static UNet load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw EnvironmentError("UNet::load: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string(magic, 8) != "SDCKPT01")
      throw EnvironmentError("UNet::load: not a checkpoint file: " + path);
    uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string hs(len, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(len));
    json header = json::parse(hs);
    UNet model(net_config_from_json(header.at("config")), 0);
    auto ps = model.params();
    const json& tensors = header.at("tensors");
    if (tensors.size() != ps.size())
      throw EnvironmentError("UNet::load: parameter count mismatch in " + path);
    for (size_t i = 0; i < ps.size(); ++i) {
      const json& t = tensors.at(i);
      const auto& shape = t.at("shape");
      if (shape.at(0).get<int>() != ps[i]->value.n || shape.at(1).get<int>() != ps[i]->value.c ||
          shape.at(2).get<int>() != ps[i]->value.h || shape.at(3).get<int>() != ps[i]->value.w)
        throw EnvironmentError("UNet::load: shape mismatch for tensor " +
                               t.at("name").get<std::string>());
      in.read(reinterpret_cast<char*>(ps[i]->value.v.data()),
              static_cast<std::streamsize>(ps[i]->value.size() * sizeof(double)));
    }
    if (!in) throw EnvironmentError("UNet::load: truncated checkpoint " + path);
    return model;
  }

private:
  struct Block {
    Param w1, b1, gn1_g, gn1_b;
    Param w2, b2, gn2_g, gn2_b;
    int groups1 = 1, groups2 = 1;
  };

  static int pick_groups(int channels, int want) {
    int g = std::min(want, channels);
    while (channels % g) --g;
    return g;
  }

  static void init_conv(Param& w, Param& b, const std::string& name, int out_c, int in_c,
                        int k, std::mt19937_64& rng) {
    Tensor wt(out_c, in_c, k, k);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (in_c * k * k)));
    for (double& v : wt.v) v = dist(rng);
    w.init(name + ".w", std::move(wt));
    b.init(name + ".b", Tensor(out_c, 1, 1, 1, 0.0));
  }

  Block make_block(const std::string& name, int in_c, int out_c, std::mt19937_64& rng) {
    Block blk;
    init_conv(blk.w1, blk.b1, name + ".conv1", out_c, in_c, 3, rng);
    init_conv(blk.w2, blk.b2, name + ".conv2", out_c, out_c, 3, rng);
    blk.gn1_g.init(name + ".gn1.g", Tensor(out_c, 1, 1, 1, 1.0));
    blk.gn1_b.init(name + ".gn1.b", Tensor(out_c, 1, 1, 1, 0.0));
    blk.gn2_g.init(name + ".gn2.g", Tensor(out_c, 1, 1, 1, 1.0));
    blk.gn2_b.init(name + ".gn2.b", Tensor(out_c, 1, 1, 1, 0.0));
    blk.groups1 = pick_groups(out_c, cfg_.gn_groups);
    blk.groups2 = blk.groups1;
    return blk;
  }

  int run_block(Graph& g, Block& b, int x) {
    x = nn::conv2d(g, x, b.w1, b.b1);
    x = nn::group_norm(g, x, b.gn1_g, b.gn1_b, b.groups1);
    x = nn::relu(g, x);
    x = nn::conv2d(g, x, b.w2, b.b2);
    x = nn::group_norm(g, x, b.gn2_g, b.gn2_b, b.groups2);
    return nn::relu(g, x);
  }

  NetConfig cfg_;
  std::vector<Block> enc_;
  std::vector<Block> dec_;
  Param seg_w_, seg_b_, proj_w_, proj_b_;
};

}  // namespace semdefect::net
