#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "tgk/graph.hpp"
#include "tgk/layers.hpp"

namespace tgk {

struct BackboneConfig {
  int stages = 1;            // L
  int layers_per_stage = 2;  // N_l
  Pooling pooling = Pooling::Mean;
  EdgeRule edge_rule{};
  LayerKind layer_kind = LayerKind::TDGC;
  int gate_hidden = 0;

  void validate() const {
    if (stages < 1) throw std::invalid_argument("backbone: at least one stage required");
    if (layers_per_stage < 1) throw std::invalid_argument("backbone: at least one layer per stage required");
    if (!(edge_rule.tau > 0.0)) throw std::invalid_argument("backbone: tau must be positive");
  }
};

struct BackboneParams {
  std::vector<std::vector<GnnLayer>> stages;

  BackboneParams() = default;
  BackboneParams(const BackboneConfig& cfg, std::size_t dim, Rng& rng) {
    cfg.validate();
    for (int l = 0; l < cfg.stages; ++l) {
      auto& stage = stages.emplace_back();
      for (int k = 0; k < cfg.layers_per_stage; ++k)
        stage.emplace_back("backbone.s" + std::to_string(l + 1) + ".l" + std::to_string(k), cfg.layer_kind, dim, rng,
                           cfg.gate_hidden);
    }
  }

  void collect(ParamList& out) {
    for (auto& s : stages)
      for (auto& l : s) l.collect(out);
  }
};

// Output of one backbone stage: G(index), index = 1..L. Its edges follow the
// rule tau * 2^(index-1), i.e. structure.stage == index - 1.
struct StageOutput {
  int index = 1;
  StageGraph graph;
};

// G(1) = N_1 layers on G(0) at full resolution; for l >= 2,
// G(l) = N_l layers on subsample(G(l-1)).
inline std::vector<StageOutput> backbone_forward(Tape& t, const StageGraph& g0, const BackboneConfig& cfg,
                                                 BackboneParams& params) {
  cfg.validate();
  if (g0.structure.stage != 0) throw std::invalid_argument("backbone_forward: input graph must be at stage 0");
  if (static_cast<int>(params.stages.size()) != cfg.stages)
    throw std::invalid_argument("backbone_forward: parameter stage count does not match config");
  std::vector<StageOutput> out;
  StageGraph g = g0;
  for (int l = 1; l <= cfg.stages; ++l) {
    if (l >= 2) {
      g = subsample(g, cfg.pooling, cfg.edge_rule);
      for (std::size_t v = 0; v < g.structure.num_videos(); ++v)
        if (g.structure.video_size(v) == 0)
          throw GraphError("backbone_forward: a video has no nodes after subsampling at stage " + std::to_string(l));
    }
    Var x = g.features;
    bool stage_input = true;
    for (auto& layer : params.stages[l - 1]) {
      x = layer.forward(t, x, g.structure, stage_input);
      stage_input = false;
    }
    g.features = x;
    out.push_back({l, g});
  }
  return out;
}

inline std::vector<TemporalGraph> backbone_forward(const TemporalGraph& g0, const BackboneConfig& cfg,
                                                   BackboneParams& params) {
  Tape t;
  auto stages = backbone_forward(t, StageGraph{t.constant(g0.features), g0.structure}, cfg, params);
  std::vector<TemporalGraph> out;
  for (auto& s : stages) out.push_back({s.graph.features.value(), s.graph.structure});
  return out;
}

}  // namespace tgk
