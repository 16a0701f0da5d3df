#include "latentcsi/weights_io.hpp"

#include <json.hpp>

#include "latentcsi/binary_io.hpp"
#include "latentcsi/error.hpp"
#include "latentcsi/fileutil.hpp"

namespace latentcsi {

namespace {
constexpr char kMagic[4] = {'L', 'C', 'S', 'W'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

std::string serialize_weights(const nn::ParamSet<float>& params, const std::string& meta_json) {
  nlohmann::json header;
  header["meta"] = meta_json.empty() ? nlohmann::json::object() : nlohmann::json::parse(meta_json);
  header["tensors"] = nlohmann::json::array();
  for (const auto& p : params.params()) {
    header["tensors"].push_back({{"name", p.name}, {"dtype", "f32"}, {"shape", p.shape}});
  }
  const std::string text = header.dump();
  std::string out(kMagic, 4);
  binio::put<std::uint32_t>(out, kVersion);
  binio::put<std::uint64_t>(out, text.size());
  out += text;
  out.reserve(out.size() + params.scalar_count() * 4);
  for (const auto& p : params.params()) {
    for (float v : p.value) binio::put<float>(out, v);
  }
  return out;
}

WeightFile deserialize_weights(const std::string& bytes) {
  binio::Reader r(bytes);
  if (r.bytes(4) != std::string_view(kMagic, 4)) throw ParseError("weight file: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) {
    throw ParseError("weight file: unsupported version " + std::to_string(version));
  }
  const auto hlen = r.get<std::uint64_t>();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.bytes(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("weight file: bad header: ") + e.what());
  }
  WeightFile wf;
  wf.meta_json = header.value("meta", nlohmann::json::object()).dump();
  for (const auto& t : header.at("tensors")) {
    if (t.at("dtype") != "f32") throw ParseError("weight file: only f32 tensors supported");
    auto& p = wf.params.add(t.at("name").get<std::string>(), t.at("shape").get<nn::Shape>());
    for (auto& v : p.value) v = r.get<float>();
  }
  if (r.remaining() != 0) throw ParseError("weight file: trailing bytes");
  return wf;
}

void save_weights(const std::filesystem::path& path, const nn::ParamSet<float>& params,
                  const std::string& meta_json) {
  write_file(path, serialize_weights(params, meta_json));
}

WeightFile load_weights(const std::filesystem::path& path) {
  return deserialize_weights(read_file(path));
}

}  // namespace latentcsi
