#include "rstereo/io.hpp"

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <map>
#include <sstream>

#include "rstereo/training.hpp"

namespace rstereo {

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Write-then-rename so readers never observe a partial file.
void write_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

template <typename U>
U byteswap(U v) {
  auto bytes = std::bit_cast<std::array<unsigned char, sizeof(U)>>(v);
  std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<U>(bytes);
}

template <typename U>
void put_le(std::string& out, U v) {
  if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

// ---------------------------------------------------------------------------
// PFM

class HeaderReader {
 public:
  explicit HeaderReader(const std::string& bytes) : b_(bytes) {}

  std::string token() {
    while (pos_ < b_.size() && std::isspace(static_cast<unsigned char>(b_[pos_]))) ++pos_;
    const std::size_t start = pos_;
    while (pos_ < b_.size() && !std::isspace(static_cast<unsigned char>(b_[pos_]))) ++pos_;
    if (start == pos_) throw ParseError("pfm: truncated header", pos_);
    return b_.substr(start, pos_ - start);
  }

  long long integer(const char* what) {
    const std::size_t at = skip_to_token();
    const std::string t = token();
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(t, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != t.size() || v <= 0) throw ParseError(std::string("pfm: bad ") + what + " '" + t + "'", at);
    return v;
  }

  double real(const char* what) {
    const std::size_t at = skip_to_token();
    const std::string t = token();
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(t, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != t.size() || v == 0 || !std::isfinite(v)) {
      throw ParseError(std::string("pfm: bad ") + what + " '" + t + "'", at);
    }
    return v;
  }

  // Exactly one whitespace byte separates the header from the payload.
  std::size_t payload_start() {
    if (pos_ >= b_.size() || !std::isspace(static_cast<unsigned char>(b_[pos_]))) {
      throw ParseError("pfm: missing separator before payload", pos_);
    }
    return pos_ + 1;
  }

  std::size_t skip_to_token() {
    while (pos_ < b_.size() && std::isspace(static_cast<unsigned char>(b_[pos_]))) ++pos_;
    return pos_;
  }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::pair<Tensor, float> read_pfm(const std::string& path) {
  const std::string bytes = slurp(path);
  HeaderReader hr(bytes);
  const std::string magic = hr.token();
  if (magic == "PF") throw ParseError("pfm: colour 'PF' maps are not disparity fields", 0);
  if (magic != "Pf") throw ParseError("pfm: bad magic '" + magic + "'", 0);
  const long long w = hr.integer("width");
  const long long h = hr.integer("height");
  const double scale = hr.real("scale");
  const std::size_t start = hr.payload_start();
  const std::size_t need = static_cast<std::size_t>(w * h) * 4;
  if (bytes.size() - std::min(bytes.size(), start) < need) {
    throw ParseError("pfm: payload truncated, need " + std::to_string(need) + " bytes", bytes.size());
  }
  const bool little = scale < 0;
  const bool swap = little != (std::endian::native == std::endian::little);
  auto t = Tensor::zeros(Shape{1, h, w});
  auto d = t.mutable_data();
  for (long long row = 0; row < h; ++row) {
    // Stored bottom-up.
    const long long y = h - 1 - row;
    for (long long x = 0; x < w; ++x) {
      std::uint32_t raw;
      std::memcpy(&raw, bytes.data() + start + static_cast<std::size_t>((row * w + x) * 4), 4);
      if (swap) raw = byteswap(raw);
      d[static_cast<std::size_t>(y * w + x)] = std::bit_cast<float>(raw);
    }
  }
  return {t, static_cast<float>(std::abs(scale))};
}

void write_pfm(const Tensor& field, const std::string& path) {
  if (!(field.rank() == 2 || (field.rank() == 3 && field.dim(0) == 1))) {
    throw DimensionError("write_pfm: expected [H,W] or [1,H,W], got " + field.shape().str());
  }
  const Index h = field.dim(field.rank() - 2), w = field.dim(field.rank() - 1);
  std::string out = "Pf\n" + std::to_string(w) + " " + std::to_string(h) + "\n-1\n";
  out.reserve(out.size() + static_cast<std::size_t>(h * w * 4));
  const auto d = field.data();
  for (Index y = h - 1; y >= 0; --y) {
    for (Index x = 0; x < w; ++x) put_le(out, std::bit_cast<std::uint32_t>(d[y * w + x]));
  }
  write_atomic(path, out);
}

// ---------------------------------------------------------------------------
// Images

namespace {

Tensor from_rgb8(const unsigned char* px, Index h, Index w) {
  auto t = Tensor::zeros(Shape{3, h, w});
  auto d = t.mutable_data();
  for (Index i = 0; i < h * w; ++i) {
    for (int c = 0; c < 3; ++c) d[c * h * w + i] = static_cast<float>(px[i * 3 + c]) / 255.f;
  }
  return t;
}

Tensor read_png_bytes(const std::string& bytes, const std::string& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw ParseError("png: " + path + ": " + img.message, 0);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> px(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, px.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw ParseError("png: " + path + ": " + msg, 0);
  }
  return from_rgb8(px.data(), img.height, img.width);
}

Tensor read_ppm_bytes(const std::string& bytes) {
  std::size_t pos = 2;
  auto next_int = [&](const char* what) {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t at = pos;
    long long v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + (bytes[pos++] - '0');
      any = true;
      if (v > (1LL << 31)) break;
    }
    if (!any || v <= 0) throw ParseError(std::string("ppm: bad ") + what, at);
    return v;
  };
  const long long w = next_int("width"), h = next_int("height"), maxval = next_int("maxval");
  if (maxval > 255) throw ParseError("ppm: only 8-bit images are supported", pos);
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw ParseError("ppm: missing separator before payload", pos);
  }
  ++pos;
  const std::size_t need = static_cast<std::size_t>(w * h * 3);
  if (bytes.size() - pos < need) throw ParseError("ppm: payload truncated", bytes.size());
  std::vector<unsigned char> px(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                bytes.begin() + static_cast<std::ptrdiff_t>(pos + need));
  if (maxval != 255) {
    for (auto& p : px) p = static_cast<unsigned char>(std::lround(std::min<long long>(p, maxval) * 255.0 / maxval));
  }
  return from_rgb8(px.data(), h, w);
}

std::string encode_png(const std::vector<unsigned char>& rgb, Index h, Index w) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, rgb.data(), 0, nullptr)) {
    throw IoError(std::string("png encode: ") + img.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, rgb.data(), 0, nullptr)) {
    throw IoError(std::string("png encode: ") + img.message);
  }
  out.resize(size);
  return out;
}

// Polynomial fit of the Turbo colormap.
std::array<double, 3> turbo(double x) {
  x = std::clamp(x, 0.0, 1.0);
  const double r = 0.13572138 + x * (4.61539260 + x * (-42.66032258 + x * (132.13108234 + x * (-152.94239396 + x * 59.28637943))));
  const double g = 0.09140261 + x * (2.19418839 + x * (4.84296658 + x * (-14.18503333 + x * (4.27729857 + x * 2.82956604))));
  const double b = 0.10667330 + x * (12.64194608 + x * (-60.58204836 + x * (110.36276771 + x * (-89.90310912 + x * 27.34824973))));
  return {std::clamp(r, 0.0, 1.0), std::clamp(g, 0.0, 1.0), std::clamp(b, 0.0, 1.0)};
}

}  // namespace

Tensor read_image(const std::string& path) {
  const std::string bytes = slurp(path);
  static const char kPngSig[] = "\x89PNG\r\n\x1a\n";
  if (bytes.size() >= 8 && bytes.compare(0, 8, kPngSig, 8) == 0) return read_png_bytes(bytes, path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return read_ppm_bytes(bytes);
  throw ParseError("image: " + path + " is neither PNG nor binary PPM", 0);
}

void write_png(const Tensor& rgb, const std::string& path) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) throw DimensionError("write_png: expected [3,H,W], got " + rgb.shape().str());
  const Index h = rgb.dim(1), w = rgb.dim(2);
  std::vector<unsigned char> px(static_cast<std::size_t>(h * w * 3));
  const auto d = rgb.data();
  for (Index i = 0; i < h * w; ++i) {
    for (int c = 0; c < 3; ++c) {
      const float v = std::isfinite(d[c * h * w + i]) ? std::clamp(d[c * h * w + i], 0.f, 1.f) : 0.f;
      px[i * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.f));
    }
  }
  write_atomic(path, encode_png(px, h, w));
}

void write_disparity_png(const Tensor& field, const std::string& path) {
  if (!(field.rank() == 2 || (field.rank() == 3 && field.dim(0) == 1))) {
    throw DimensionError("write_disparity_png: expected [H,W] or [1,H,W], got " + field.shape().str());
  }
  const Index h = field.dim(field.rank() - 2), w = field.dim(field.rank() - 1);
  const auto d = field.data();
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (float v : d) {
    if (!std::isfinite(v)) continue;
    lo = std::min(lo, double(v));
    hi = std::max(hi, double(v));
  }
  if (lo > hi) lo = hi = 0;
  const double range = hi > lo ? hi - lo : 1.0;
  std::vector<unsigned char> px(static_cast<std::size_t>(h * w * 3), 0);
  for (Index i = 0; i < h * w; ++i) {
    if (!std::isfinite(d[i])) continue;
    const auto c = turbo((double(d[i]) - lo) / range);
    for (int k = 0; k < 3; ++k) px[i * 3 + k] = static_cast<unsigned char>(std::lround(c[k] * 255.0));
  }
  write_atomic(path, encode_png(px, h, w));
  std::ostringstream side;
  side << std::setprecision(9) << "min " << lo << "\nmax " << hi << "\n";
  write_atomic(path + ".txt", side.str());
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout, all integers little-endian:
//   magic[8] version:u32 config_len:u32 config[config_len] seed:u64
//   model section, optimiser section; each: count:u32 then per tensor
//   name_len:u32 name rank:u32 dims:u64[rank] payload_bytes:u64 payload crc32:u32

namespace {

constexpr char kMagic[8] = {'R', 'S', 'T', 'C', 'K', 'P', 'T', '\n'};

struct Record {
  std::vector<Index> dims;
  std::string payload;
  std::uint32_t crc = 0;
};

struct Section {
  std::vector<std::string> order;
  std::map<std::string, Record> records;
};

void put_tensor(std::string& out, const std::string& name, const Tensor& t) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (Index d : t.shape().dims()) put_le<std::uint64_t>(out, static_cast<std::uint64_t>(d));
  std::string payload;
  payload.reserve(static_cast<std::size_t>(t.numel() * 4));
  for (float v : t.data()) put_le(payload, std::bit_cast<std::uint32_t>(v));
  put_le<std::uint64_t>(out, payload.size());
  out += payload;
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(
                                 ::crc32(0L, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size()))));
}

class Cursor {
 public:
  Cursor(const std::string& bytes, std::string path) : b_(bytes), path_(std::move(path)) {}

  template <typename U>
  U get(const std::string& context) {
    need(sizeof(U), context);
    U v;
    std::memcpy(&v, b_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
    return v;
  }

  std::string bytes(std::uint64_t n, const std::string& context) {
    need(n, context);
    std::string s = b_.substr(pos_, static_cast<std::size_t>(n));
    pos_ += static_cast<std::size_t>(n);
    return s;
  }

  bool at_end() const { return pos_ == b_.size(); }

 private:
  void need(std::uint64_t n, const std::string& context) {
    if (n > b_.size() - pos_) throw LoadError("truncated checkpoint " + path_, context);
  }

  const std::string& b_;
  std::string path_;
  std::size_t pos_ = 0;
};

Section read_section(Cursor& c, const std::string& what) {
  Section s;
  const auto count = c.get<std::uint32_t>(what);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = c.get<std::uint32_t>(what);
    if (name_len > 4096) throw LoadError("implausible tensor name length", what);
    const std::string name = c.bytes(name_len, what);
    Record r;
    const auto rank = c.get<std::uint32_t>(name);
    if (rank > 8) throw LoadError("implausible rank " + std::to_string(rank), name);
    Index numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = c.get<std::uint64_t>(name);
      if (d > (1ULL << 32)) throw LoadError("implausible extent", name);
      r.dims.push_back(static_cast<Index>(d));
      numel *= static_cast<Index>(d);
    }
    const auto payload_bytes = c.get<std::uint64_t>(name);
    if (payload_bytes != static_cast<std::uint64_t>(numel) * 4) {
      throw LoadError("shape mismatch: payload of " + std::to_string(payload_bytes) + " bytes for shape " +
                          Shape(r.dims).str(),
                      name);
    }
    r.payload = c.bytes(payload_bytes, name);
    r.crc = c.get<std::uint32_t>(name);
    if (s.records.count(name)) throw LoadError("duplicate tensor", name);
    s.order.push_back(name);
    s.records.emplace(name, std::move(r));
  }
  return s;
}

struct ParsedCheckpoint {
  CheckpointHeader header;
  Section model, optimizer;
};

ParsedCheckpoint parse_checkpoint(const std::string& path) {
  std::string bytes;
  try {
    bytes = slurp(path);
  } catch (const IoError& e) {
    throw LoadError(e.what(), "<file>");
  }
  Cursor c(bytes, path);
  ParsedCheckpoint p;
  if (c.bytes(8, "<header>") != std::string(kMagic, 8)) throw LoadError("not a checkpoint: " + path, "<header>");
  p.header.version = c.get<std::uint32_t>("<header>");
  if (p.header.version != kCheckpointVersion) {
    throw LoadError("unsupported checkpoint version " + std::to_string(p.header.version) + " (expected " +
                        std::to_string(kCheckpointVersion) + ")",
                    "<header>");
  }
  const auto config_len = c.get<std::uint32_t>("<config>");
  const std::string config = c.bytes(config_len, "<config>");
  try {
    p.header.config = ModelConfig::from_json(config);
  } catch (const std::exception& e) {
    throw LoadError(std::string("invalid stored configuration: ") + e.what(), "<config>");
  }
  p.header.seed = c.get<std::uint64_t>("<header>");
  p.model = read_section(c, "<model>");
  p.optimizer = read_section(c, "<optimizer>");
  if (!c.at_end()) throw LoadError("trailing bytes after checkpoint", "<file>");
  return p;
}

using Assignment = std::vector<std::pair<Tensor, const Record*>>;

// Matches every visited tensor to a verified record; nothing is written until
// the whole checkpoint has been checked.
template <typename Visit>
void match(const Section& s, Visit&& visit, Assignment& out, const std::string& section) {
  std::map<std::string, bool> used;
  visit([&](const std::string& name, Tensor& t, bool) {
    auto it = s.records.find(name);
    if (it == s.records.end()) throw LoadError("missing tensor in " + section, name);
    const Record& r = it->second;
    if (Shape(r.dims) != t.shape()) {
      throw LoadError("shape mismatch: checkpoint " + Shape(r.dims).str() + " vs model " + t.shape().str(), name);
    }
    const auto crc = static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(r.payload.data()), static_cast<uInt>(r.payload.size())));
    if (crc != r.crc) throw LoadError("checksum mismatch", name);
    used[name] = true;
    out.emplace_back(t, &r);
  });
  for (const auto& name : s.order) {
    if (!used.count(name)) throw LoadError("unexpected tensor in " + section, name);
  }
}

void apply(Assignment& a) {
  for (auto& [t, r] : a) {
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      std::uint32_t raw;
      std::memcpy(&raw, r->payload.data() + i * 4, 4);
      if constexpr (std::endian::native == std::endian::big) raw = byteswap(raw);
      d[i] = std::bit_cast<float>(raw);
    }
  }
}

std::string describe_conflict(const ModelConfig& stored, const ModelConfig& model) {
  const auto a = nlohmann::json::parse(stored.to_json()), b = nlohmann::json::parse(model.to_json());
  std::string out;
  for (const auto& op : nlohmann::json::diff(a, b)) {
    const auto ptr = nlohmann::json::json_pointer(op.at("path").get<std::string>());
    if (!out.empty()) out += ", ";
    out += ptr.to_string() + " checkpoint " + (a.contains(ptr) ? a.at(ptr).dump() : "absent") + " model " +
           (b.contains(ptr) ? b.at(ptr).dump() : "absent");
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, StereoModel<float>& model, AdamW* optimizer) {
  std::string out(kMagic, 8);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string config = model.config().to_json();
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(config.size()));
  out += config;
  put_le<std::uint64_t>(out, model.seed());

  std::vector<std::pair<std::string, Tensor>> tensors;
  model.visit([&](const std::string& name, Tensor& t, bool) { tensors.emplace_back(name, t); });
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) put_tensor(out, name, t);

  tensors.clear();
  if (optimizer) optimizer->visit([&](const std::string& name, Tensor& t, bool) { tensors.emplace_back(name, t); });
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) put_tensor(out, name, t);

  write_atomic(path, out);
}

CheckpointHeader read_checkpoint_header(const std::string& path) { return parse_checkpoint(path).header; }

void load_checkpoint(const std::string& path, StereoModel<float>& model, AdamW* optimizer) {
  const auto p = parse_checkpoint(path);
  if (p.header.config.to_json() != model.config().to_json()) {
    throw ConfigConflictError("configuration conflict: " + describe_conflict(p.header.config, model.config()),
                              "<config>");
  }
  Assignment assign;
  match(p.model, [&](const TensorVisitor<float>& v) { model.visit(v); }, assign, "model");
  if (optimizer) {
    if (p.optimizer.order.empty()) throw LoadError("checkpoint holds no optimizer state", "<optimizer>");
    match(p.optimizer, [&](const TensorVisitor<float>& v) { optimizer->visit(v); }, assign, "optimizer");
  }
  apply(assign);
}

std::unique_ptr<StereoModel<float>> load_model(const std::string& path) {
  const auto header = read_checkpoint_header(path);
  auto model = std::make_unique<StereoModel<float>>(header.config, header.seed);
  load_checkpoint(path, *model, nullptr);
  model->set_training(false);
  return model;
}

}  // namespace rstereo
