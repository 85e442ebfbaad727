#include "tscan/checkpoint.hpp"

#include <cstring>

#include <nlohmann/json.hpp>

#include "tscan/errors.hpp"
#include "tscan/io_util.hpp"

namespace tscan {

namespace {
constexpr char kMagic[8] = {'T', 'S', 'C', 'A', 'N', 'C', 'K', 'P'};
constexpr std::uint32_t kFormatVersion = 1;
}  // namespace

void save_checkpoint(const CanModel& model, const std::string& path) {
  nlohmann::json header;
  header["format_version"] = kFormatVersion;
  header["model_config"] = nlohmann::json::parse(model.config().to_json());
  header["schema"] = nlohmann::json::parse(model.schema().to_json());
  header["normalization"] = nlohmann::json::parse(model.normalization().to_json());
  header["init_seed"] = model.init_seed();

  nlohmann::json params = nlohmann::json::array();
  std::int64_t offset = 0;
  for (int i = 0; i < model.param_count(); ++i) {
    const Tensor& t = model.param(i);
    params.push_back({{"name", model.param_name(i)},
                      {"rows", t.rows()},
                      {"cols", t.cols()},
                      {"offset", offset}});
    offset += t.size();
  }
  header["params"] = std::move(params);
  header["value_count"] = offset;

  const std::string header_text = header.dump();
  std::string out;
  out.reserve(sizeof(kMagic) + 4 + header_text.size() +
              static_cast<std::size_t>(offset) * 8);
  out.append(kMagic, sizeof(kMagic));
  append_u32_le(out, static_cast<std::uint32_t>(header_text.size()));
  out += header_text;
  for (int i = 0; i < model.param_count(); ++i) {
    for (double v : model.param(i).values()) append_f64_le(out, v);
  }
  write_file(path, out);
}

CanModel load_checkpoint(const std::string& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < sizeof(kMagic) + 4 ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw ParseError("checkpoint '" + path + "': bad magic");
  }
  const auto* base = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t header_len = read_u32_le(base + sizeof(kMagic));
  const std::size_t header_off = sizeof(kMagic) + 4;
  if (bytes.size() < header_off + header_len) {
    throw ParseError("checkpoint '" + path + "': truncated header");
  }

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(header_off, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint '" + path + "': header is not valid JSON: " + e.what());
  }
  try {
    if (header.at("format_version").get<std::uint32_t>() != kFormatVersion) {
      throw ParseError("checkpoint '" + path + "': unsupported format version " +
                       header.at("format_version").dump());
    }
    const ModelConfig config = ModelConfig::from_json(header.at("model_config").dump());
    const FeatureSchema schema = FeatureSchema::from_json(header.at("schema").dump());
    const NormalizationParams norm =
        NormalizationParams::from_json(header.at("normalization").dump());
    const std::uint64_t init_seed = header.at("init_seed").get<std::uint64_t>();

    CanModel model(config, schema, norm, init_seed);

    const auto& params = header.at("params");
    if (static_cast<int>(params.size()) != model.param_count()) {
      throw ParseError("checkpoint '" + path + "': expected " +
                       std::to_string(model.param_count()) + " tensors, header lists " +
                       std::to_string(params.size()));
    }
    const std::int64_t value_count = header.at("value_count").get<std::int64_t>();
    const std::size_t payload_off = header_off + header_len;
    if (bytes.size() != payload_off + static_cast<std::size_t>(value_count) * 8) {
      throw ParseError("checkpoint '" + path + "': payload size mismatch");
    }

    std::int64_t offset = 0;
    for (int i = 0; i < model.param_count(); ++i) {
      Tensor& t = model.param(i);
      const auto& p = params[i];
      if (p.at("name").get<std::string>() != model.param_name(i) ||
          p.at("rows").get<int>() != t.rows() || p.at("cols").get<int>() != t.cols() ||
          p.at("offset").get<std::int64_t>() != offset) {
        throw ParseError("checkpoint '" + path + "': tensor " + std::to_string(i) +
                         " ('" + model.param_name(i) + "') does not match the header");
      }
      for (std::int64_t k = 0; k < t.size(); ++k) {
        t.values()[static_cast<std::size_t>(k)] =
            read_f64_le(base + payload_off + static_cast<std::size_t>(offset + k) * 8);
      }
      if (!t.all_finite()) {
        throw ParseError("checkpoint '" + path + "': tensor '" + model.param_name(i) +
                         "' holds non-finite values");
      }
      offset += t.size();
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint '" + path + "': malformed header: " + e.what());
  }
}

}  // namespace tscan
