#pragma once

// Model checkpoints: named f32 parameter blocks behind a JSON header.
//
//   magic "LPVM" | u32 version=1 | u32 header_bytes | header JSON (UTF-8) |
//   f32 block data, little-endian, in header "params" order (row-major)
//
// The header carries {"kind", "config", "params": [{"name","rows","cols"}], ...}
// plus whatever metadata the caller adds (stage history, provenance hashes).

#include "json.hpp"
#include "lpv/autograd.hpp"
#include "lpv/binary_io.hpp"

#include <filesystem>

namespace lpv {

struct Checkpoint {
  nlohmann::json header;
  std::vector<std::pair<std::string, Mat>> blocks;
};

inline constexpr char kCheckpointMagic[4] = {'L', 'P', 'V', 'M'};

inline void save_checkpoint(const std::filesystem::path& path, nlohmann::json header, const ag::ParameterStore& params) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto* p : params.all())
    list.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
  header["params"] = list;
  const std::string text = header.dump();
  std::string out(kCheckpointMagic, 4);
  io::put_u32(out, 1);
  io::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (const auto* p : params.all())
    for (Eigen::Index i = 0; i < p->value.size(); ++i) io::put_f32(out, static_cast<float>(p->value.data()[i]));
  io::write_file(path, out);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  io::Reader r(io::read_file(path), path.string());
  if (r.bytes(4, "magic") != std::string(kCheckpointMagic, 4)) fail<FormatError>(path.string(), ": bad magic at offset 0");
  const auto version = r.u32("version");
  if (version != 1) fail<FormatError>(path.string(), ": unsupported version ", version, " at offset 4");
  const auto len = r.u32("header length");
  Checkpoint ck;
  try {
    ck.header = nlohmann::json::parse(r.bytes(len, "header"));
    for (const auto& p : ck.header.at("params")) {
      Mat m(p.at("rows").get<Eigen::Index>(), p.at("cols").get<Eigen::Index>());
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.f32(p.at("name").get<std::string>());
      ck.blocks.emplace_back(p.at("name").get<std::string>(), std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    fail<FormatError>(path.string(), ": malformed header: ", e.what());
  }
  if (r.remaining() != 0) fail<FormatError>(path.string(), ": trailing bytes at offset ", r.offset());
  return ck;
}

/// Copies checkpoint blocks into same-named parameters; shapes must agree and
/// every parameter must be present.
inline void restore_parameters(ag::ParameterStore& params, const Checkpoint& ck) {
  for (auto* p : params.all()) {
    bool found = false;
    for (const auto& [name, m] : ck.blocks) {
      if (name != p->name) continue;
      if (m.rows() != p->value.rows() || m.cols() != p->value.cols())
        fail<FormatError>("checkpoint block ", name, " has shape ", m.rows(), "x", m.cols(), ", model expects ",
                          p->value.rows(), "x", p->value.cols());
      p->value = m;
      found = true;
      break;
    }
    if (!found) fail<FormatError>("checkpoint lacks parameter ", p->name);
  }
}

}  // namespace lpv
