#include "shaperefine/mgrid.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <ostream>
#include <string>

namespace shaperefine::mgrid {

namespace {

void write_header(std::ostream& out, const json& header) {
  out << header.dump() << '\n';
}

}  // namespace

void write(std::ostream& out, const json& header, std::span<const float> payload) {
  write_header(out, header);
  std::vector<char> bytes(payload.size() * 4);
  for (std::size_t i = 0; i < payload.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(payload[i]);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing MGRID payload");
}

void write(std::ostream& out, const json& header, std::span<const std::uint8_t> payload) {
  write_header(out, header);
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
  if (!out) throw std::runtime_error("failed writing MGRID payload");
}

Blob read(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("MGRID: missing header line");
  Blob blob;
  try {
    blob.header = json::parse(line);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("MGRID: header is not valid JSON: ") + e.what());
  }
  const auto& h = blob.header;
  if (!h.is_object()) throw FormatError("MGRID: header must be a JSON object");
  if (!h.contains("magic") || h["magic"] != "MGRID") throw FormatError("MGRID: bad field 'magic'");
  if (!h.contains("version") || !h["version"].is_number_integer() || h["version"] != 1) {
    throw FormatError("MGRID: bad field 'version'");
  }
  if (!h.contains("kind") || !h["kind"].is_string() ||
      (h["kind"] != "f32" && h["kind"] != "u8")) {
    throw FormatError("MGRID: bad field 'kind'");
  }
  blob.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return blob;
}

Blob read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read(in);
}

std::vector<float> decode_f32(const Blob& blob, std::size_t expected_count) {
  if (blob.header["kind"] != "f32") throw FormatError("MGRID: bad field 'kind' (expected f32)");
  if (blob.payload.size() != expected_count * 4) {
    throw SizeMismatchError("MGRID: payload holds " + std::to_string(blob.payload.size()) +
                            " bytes, header requires " + std::to_string(expected_count * 4));
  }
  std::vector<float> out(expected_count);
  for (std::size_t i = 0; i < expected_count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob.payload[i * 4 + b]))
              << (8 * b);
    }
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

std::vector<std::uint8_t> decode_u8(const Blob& blob, std::size_t expected_count) {
  if (blob.header["kind"] != "u8") throw FormatError("MGRID: bad field 'kind' (expected u8)");
  if (blob.payload.size() != expected_count) {
    throw SizeMismatchError("MGRID: payload holds " + std::to_string(blob.payload.size()) +
                            " bytes, header requires " + std::to_string(expected_count));
  }
  std::vector<std::uint8_t> out(expected_count);
  std::memcpy(out.data(), blob.payload.data(), expected_count);
  return out;
}

json vec3_to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 vec3_from_json(const json& j, const char* field) {
  if (!j.is_array() || j.size() != 3) {
    throw FormatError(std::string("bad field '") + field + "': expected 3 numbers");
  }
  Vec3 v;
  for (int a = 0; a < 3; ++a) {
    if (!j[a].is_number()) throw FormatError(std::string("bad field '") + field + "': not numeric");
    v[a] = j[a].get<double>();
  }
  return v;
}

json geometry_to_json(const Geometry& g) {
  return json{{"dims", json::array({g.dims[0], g.dims[1], g.dims[2]})},
              {"spacing", vec3_to_json(g.spacing)},
              {"origin", vec3_to_json(g.origin)}};
}

Geometry geometry_from_json(const json& header) {
  Geometry g;
  if (!header.contains("dims")) throw FormatError("MGRID: missing field 'dims'");
  const auto& d = header["dims"];
  if (!d.is_array() || d.size() != 3) throw FormatError("MGRID: bad field 'dims'");
  for (int a = 0; a < 3; ++a) {
    if (!d[a].is_number_integer() || d[a].get<long long>() < 1 ||
        d[a].get<long long>() > (1LL << 30)) {
      throw FormatError("MGRID: bad field 'dims'");
    }
    g.dims[a] = d[a].get<int>();
  }
  if (!header.contains("spacing")) throw FormatError("MGRID: missing field 'spacing'");
  g.spacing = vec3_from_json(header["spacing"], "spacing");
  for (int a = 0; a < 3; ++a) {
    if (!(g.spacing[a] > 0.0) || !std::isfinite(g.spacing[a])) {
      throw FormatError("MGRID: bad field 'spacing' (must be > 0)");
    }
  }
  if (!header.contains("origin")) throw FormatError("MGRID: missing field 'origin'");
  g.origin = vec3_from_json(header["origin"], "origin");
  if (!g.origin.allFinite()) throw FormatError("MGRID: bad field 'origin'");
  return g;
}

void ensure_parent_directory(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
}

}  // namespace shaperefine::mgrid
