#pragma once

// Turns LPV index sequences into prosody records (pitch contour + word
// durations) so that predicted LPVs can be scored against ground truth.
//
// The renderer is fitted without cluster labels: per code it learns a linear
// pitch template (Hz = a + b * frame-in-word) from the voiced frames of the
// training words that the encoder mapped to that code, and it keeps the
// observed durations per (word, code), per code, and overall. Rendering draws
// a duration from the most specific non-empty pool using a per-utterance
// seeded stream, so output is a pure function of (renderer, input, seed).

#include "lpv/corpus.hpp"
#include "lpv/prosody_encoder.hpp"
#include "lpv/prosody_records.hpp"

#include <array>
#include <map>

namespace lpv {

struct ProsodyRenderer {
  int K = 0;
  std::vector<double> pitch_intercept;  // K
  std::vector<double> pitch_slope;      // K
  std::map<std::pair<int, int>, std::vector<int>> word_code_durations;
  std::vector<std::vector<int>> code_durations;  // K
  std::vector<int> all_durations;
};

/// Fits the renderer on utterances with known pitch and their LPVs. Codes never
/// observed fall back to the global pitch fit.
inline ProsodyRenderer fit_renderer(const std::vector<Utterance>& utts, const std::vector<LpvSequence>& lpv, int k) {
  std::map<std::string, const LpvSequence*> by_id;
  for (const auto& s : lpv) by_id[s.utt_id] = &s;
  ProsodyRenderer r;
  r.K = k;
  r.code_durations.resize(static_cast<std::size_t>(k));
  // Normal-equation accumulators [n, sum j, sum j^2, sum y, sum j*y] per code, plus a global row.
  std::vector<std::array<double, 5>> acc(static_cast<std::size_t>(k) + 1, std::array<double, 5>{});
  for (const auto& u : utts) {
    auto it = by_id.find(u.id);
    if (it == by_id.end()) continue;
    const auto& idx = it->second->indices;
    if (idx.size() != u.words.size()) fail<ValidationError>(u.id, ": LPV length differs from word count");
    if (u.pitch.size() != static_cast<std::size_t>(u.n_frames()))
      fail<ValidationError>(u.id, ": renderer needs the pitch contour");
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const int c = idx[i];
      if (c < 0 || c >= k) fail<ValidationError>(u.id, ": LPV index ", c, " outside [0, ", k, ")");
      const auto& b = u.boundaries[i];
      r.word_code_durations[{u.words[i], c}].push_back(b.length());
      r.code_durations[static_cast<std::size_t>(c)].push_back(b.length());
      r.all_durations.push_back(b.length());
      for (int f = b.start; f < b.end; ++f) {
        if (!u.voiced[static_cast<std::size_t>(f)]) continue;
        const double j = f - b.start;
        const double y = u.pitch[static_cast<std::size_t>(f)];
        for (auto* a : {&acc[static_cast<std::size_t>(c)], &acc.back()}) {
          (*a)[0] += 1.0;
          (*a)[1] += j;
          (*a)[2] += j * j;
          (*a)[3] += y;
          (*a)[4] += j * y;
        }
      }
    }
  }
  if (r.all_durations.empty()) fail<ValidationError>("fit_renderer: no utterance has an LPV sequence");
  auto solve = [](const std::array<double, 5>& a, double& intercept, double& slope) {
    const double det = a[0] * a[2] - a[1] * a[1];
    if (a[0] == 0.0) return false;
    if (std::abs(det) < 1e-9 * std::max(1.0, a[0] * a[2])) {
      intercept = a[3] / a[0];
      slope = 0.0;
    } else {
      slope = (a[0] * a[4] - a[1] * a[3]) / det;
      intercept = (a[3] - slope * a[1]) / a[0];
    }
    return true;
  };
  double g_int = 0.0, g_slope = 0.0;
  if (!solve(acc.back(), g_int, g_slope)) fail<ValidationError>("fit_renderer: no voiced frames");
  for (int c = 0; c < k; ++c) {
    double a = g_int, b = g_slope;
    solve(acc[static_cast<std::size_t>(c)], a, b);
    r.pitch_intercept.push_back(a);
    r.pitch_slope.push_back(b);
  }
  return r;
}

/// Renders one utterance. Voicing follows the corpus convention (word onset and
/// final frame unvoiced).
inline void render_utterance(const ProsodyRenderer& r, const std::string& utt_id, std::span<const int> words,
                             std::span<const int> indices, std::uint64_t seed, int system_id, ProsodyFile& out) {
  if (words.size() != indices.size()) fail<ValidationError>(utt_id, ": LPV length differs from word count");
  Rng rng(substream(seed, "render/" + utt_id));
  PitchRecord p{utt_id, {}, {}};
  for (std::size_t i = 0; i < words.size(); ++i) {
    const int c = indices[i];
    if (c < 0 || c >= r.K) fail<ValidationError>(utt_id, ": LPV index ", c, " outside [0, ", r.K, ")");
    const std::vector<int>* pool = &r.all_durations;
    if (auto it = r.word_code_durations.find({words[i], c}); it != r.word_code_durations.end())
      pool = &it->second;
    else if (!r.code_durations[static_cast<std::size_t>(c)].empty())
      pool = &r.code_durations[static_cast<std::size_t>(c)];
    const int d = (*pool)[uniform_index(rng, pool->size())];
    for (int j = 0; j < d; ++j) {
      p.pitch.push_back(r.pitch_intercept[static_cast<std::size_t>(c)] + r.pitch_slope[static_cast<std::size_t>(c)] * j);
      p.voiced.push_back(frame_voiced(j, d));
    }
    out.durations.push_back({utt_id, words[i], d, system_id});
  }
  out.pitch.push_back(std::move(p));
}

struct WordSequence {
  std::string utt_id;
  std::vector<int> words;
};

inline ProsodyFile render_all(const ProsodyRenderer& r, const std::vector<WordSequence>& utts,
                              const std::vector<LpvSequence>& lpv, std::uint64_t seed, int system_id,
                              Provenance provenance = {}) {
  std::map<std::string, const LpvSequence*> by_id;
  for (const auto& s : lpv) by_id[s.utt_id] = &s;
  ProsodyFile out;
  out.provenance = std::move(provenance);
  for (const auto& u : utts) {
    auto it = by_id.find(u.utt_id);
    if (it == by_id.end()) fail<ValidationError>(u.utt_id, ": no LPV sequence to render");
    render_utterance(r, u.utt_id, u.words, it->second->indices, seed, system_id, out);
  }
  return out;
}

/// Baseline LPVs drawn uniformly from [0, K) per word.
inline std::vector<LpvSequence> uniform_lpv(const std::vector<WordSequence>& utts, int k, std::uint64_t seed) {
  std::vector<LpvSequence> out;
  for (const auto& u : utts) {
    Rng rng(substream(seed, "uniform/" + u.utt_id));
    LpvSequence s{u.utt_id, {}};
    for (std::size_t i = 0; i < u.words.size(); ++i)
      s.indices.push_back(static_cast<int>(uniform_index(rng, static_cast<std::size_t>(k))));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace lpv
