// SPDX-License-Identifier: Apache-2.0
#include "foldkit/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "foldkit/error.hpp"
#include "json.hpp"

namespace foldkit {

static_assert(std::endian::native == std::endian::little, "foldkit file I/O assumes a little-endian host");

namespace {

using json = nlohmann::ordered_json;

constexpr std::string_view kModelMagic = "FNETv1";
constexpr std::string_view kDatasetMagic = "FDSTv1";

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n) const {
    if (remaining() < n) {
      fail(ErrorKind::Format, what_ + ": truncated, expected " + std::to_string(pos_ + n) + " bytes but file has " +
                                  std::to_string(bytes_.size()));
    }
  }

 private:
  std::string_view bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

void append_f32(std::string& blob, const Tensor& t) {
  for (double v : t.values) put(blob, static_cast<float>(v));
}

json tensor_entry(std::string_view name, const Tensor& t, std::string& blob) {
  json e;
  e["name"] = name;
  e["shape"] = t.shape;
  e["offset"] = blob.size();
  e["length"] = t.size() * sizeof(float);
  append_f32(blob, t);
  return e;
}

json blocks_to_json(const std::vector<Block>& blocks, std::string& blob) {
  json arr = json::array();
  for (const auto& b : blocks) {
    json j;
    j["kind"] = to_string(b.kind());
    json tensors = json::array();
    switch (b.kind()) {
      case BlockKind::Dense:
        tensors.push_back(tensor_entry("weight", b.as<Dense>().weight, blob));
        tensors.push_back(tensor_entry("bias", b.as<Dense>().bias, blob));
        break;
      case BlockKind::Conv2D:
        j["stride"] = b.as<Conv2D>().stride;
        j["padding"] = b.as<Conv2D>().padding;
        tensors.push_back(tensor_entry("weight", b.as<Conv2D>().weight, blob));
        tensors.push_back(tensor_entry("bias", b.as<Conv2D>().bias, blob));
        break;
      case BlockKind::BatchNorm: {
        const auto& bn = b.as<BatchNorm>();
        j["epsilon"] = bn.epsilon;
        tensors.push_back(tensor_entry("gamma", bn.gamma, blob));
        tensors.push_back(tensor_entry("beta", bn.beta, blob));
        tensors.push_back(tensor_entry("running_mean", bn.running_mean, blob));
        tensors.push_back(tensor_entry("running_var", bn.running_var, blob));
        break;
      }
      case BlockKind::AvgPool:
        j["window"] = b.as<AvgPool>().window;
        break;
      case BlockKind::Residual:
        j["main"] = blocks_to_json(b.as<Residual>().main, blob);
        j["shortcut"] = blocks_to_json(b.as<Residual>().shortcut, blob);
        break;
      default:
        break;
    }
    if (!tensors.empty()) j["tensors"] = std::move(tensors);
    arr.push_back(std::move(j));
  }
  return arr;
}

class BlobView {
 public:
  explicit BlobView(std::string_view blob) : blob_(blob) {}

  Tensor tensor(const json& block, std::string_view name) const {
    if (!block.contains("tensors")) fail(ErrorKind::Format, "block without tensors");
    for (const auto& e : block["tensors"]) {
      if (e.at("name").get<std::string>() != name) continue;
      Shape shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto length = e.at("length").get<std::size_t>();
      const std::size_t count = element_count(shape);
      if (length != count * sizeof(float)) {
        fail(ErrorKind::Format, "tensor '" + std::string(name) + "' length " + std::to_string(length) +
                                    " does not match shape " + shape_string(shape));
      }
      if (offset > blob_.size() || length > blob_.size() - offset) {
        fail(ErrorKind::Format, "tensor '" + std::string(name) + "' extends past the blob (needs " +
                                    std::to_string(offset + length) + " bytes, blob has " +
                                    std::to_string(blob_.size()) + ")");
      }
      Tensor t(shape);
      for (std::size_t i = 0; i < count; ++i) {
        float f;
        std::memcpy(&f, blob_.data() + offset + i * sizeof(float), sizeof(float));
        t[i] = f;
      }
      return t;
    }
    fail(ErrorKind::Format, "missing tensor '" + std::string(name) + "'");
  }

 private:
  std::string_view blob_;
};

std::vector<Block> blocks_from_json(const json& arr, const BlobView& blob) {
  if (!arr.is_array()) fail(ErrorKind::Format, "blocks must be an array");
  std::vector<Block> out;
  for (const auto& j : arr) {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "dense") {
      out.push_back(Block{Dense{blob.tensor(j, "weight"), blob.tensor(j, "bias")}});
    } else if (kind == "conv2d") {
      out.push_back(Block{Conv2D{blob.tensor(j, "weight"), blob.tensor(j, "bias"), j.at("stride").get<std::size_t>(),
                                 j.at("padding").get<std::size_t>()}});
    } else if (kind == "batchnorm") {
      out.push_back(Block{BatchNorm{blob.tensor(j, "gamma"), blob.tensor(j, "beta"), blob.tensor(j, "running_mean"),
                                    blob.tensor(j, "running_var"), j.at("epsilon").get<double>()}});
    } else if (kind == "relu") {
      out.push_back(make_relu());
    } else if (kind == "avgpool") {
      out.push_back(make_avgpool(j.at("window").get<std::size_t>()));
    } else if (kind == "flatten") {
      out.push_back(make_flatten());
    } else if (kind == "residual") {
      out.push_back(make_residual(blocks_from_json(j.at("main"), blob), blocks_from_json(j.at("shortcut"), blob)));
    } else {
      fail(ErrorKind::Format, "unknown block kind '" + kind + "'");
    }
  }
  return out;
}

}  // namespace

std::string serialize_model(const Network& net) {
  std::string blob;
  json m;
  m["magic"] = kModelMagic;
  m["input_shape"] = net.input_shape;
  m["class_count"] = net.class_count;
  m["blocks"] = blocks_to_json(net.blocks, blob);
  m["blob_bytes"] = blob.size();
  std::string out = m.dump();
  out.push_back('\n');
  out += blob;
  return out;
}

Network parse_model(std::string_view bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string_view::npos) fail(ErrorKind::Format, "model file has no manifest line");
  json m;
  try {
    m = json::parse(bytes.substr(0, nl));
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("model manifest is not valid JSON: ") + e.what());
  }
  if (!m.is_object() || m.empty() || m.begin().key() != "magic") {
    fail(ErrorKind::Format, "model manifest must start with a magic field");
  }
  if (m["magic"] != kModelMagic) {
    fail(ErrorKind::Format, "unsupported model magic '" + m["magic"].dump() + "', expected FNETv1");
  }
  const std::string_view blob = bytes.substr(nl + 1);
  try {
    const auto expected = m.at("blob_bytes").get<std::size_t>();
    if (blob.size() != expected) {
      fail(ErrorKind::Format, "model blob length mismatch: manifest expects " + std::to_string(expected) +
                                  " bytes, file has " + std::to_string(blob.size()));
    }
    Network net;
    net.input_shape = m.at("input_shape").get<Shape>();
    net.class_count = m.at("class_count").get<std::size_t>();
    net.blocks = blocks_from_json(m.at("blocks"), BlobView(blob));
    validate(net);
    return net;
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("malformed model manifest: ") + e.what());
  }
}

void save_model(const Network& net, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_model(net));
}

Network load_model(const std::filesystem::path& path) { return parse_model(read_file(path)); }

// ---------------------------------------------------------------------------

void validate(const Dataset& data) {
  if (data.features.rank() < 2) fail(ErrorKind::Shape, "dataset features need a sample axis");
  if (data.features.dim(0) != data.labels.size()) {
    fail(ErrorKind::Shape, "dataset has " + std::to_string(data.features.dim(0)) + " feature rows but " +
                               std::to_string(data.labels.size()) + " labels");
  }
  for (std::size_t y : data.labels) {
    if (y >= data.class_count) fail(ErrorKind::Value, "dataset label " + std::to_string(y) + " >= class count");
  }
  if (!data.features.all_finite()) fail(ErrorKind::Value, "dataset features contain non-finite values");
}

Dataset subset(const Dataset& data, std::size_t begin, std::size_t end) {
  if (begin > end || end > data.size()) fail(ErrorKind::Value, "dataset subset out of range");
  Dataset out;
  out.class_count = data.class_count;
  out.split = data.split;
  Shape s = data.features.shape;
  s[0] = end - begin;
  const std::size_t stride = element_count(data.sample_shape());
  out.features = Tensor(s, std::vector<double>(data.features.values.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                               data.features.values.begin() + static_cast<std::ptrdiff_t>(end * stride)));
  out.labels.assign(data.labels.begin() + static_cast<std::ptrdiff_t>(begin),
                    data.labels.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

std::string serialize_dataset(const Dataset& data) {
  validate(data);
  if (data.class_count > 65536) fail(ErrorKind::Value, "FDSTv1 labels are 16-bit");
  std::string out(kDatasetMagic);
  put(out, static_cast<std::uint32_t>(data.size()));
  const Shape per = data.sample_shape();
  put(out, static_cast<std::uint32_t>(per.size()));
  for (auto d : per) put(out, static_cast<std::uint32_t>(d));
  put(out, static_cast<std::uint32_t>(data.class_count));
  append_f32(out, data.features);
  for (auto y : data.labels) put(out, static_cast<std::uint16_t>(y));
  return out;
}

Dataset parse_dataset(std::string_view bytes) {
  Reader r(bytes, "dataset");
  if (r.take(kDatasetMagic.size()) != kDatasetMagic) fail(ErrorKind::Format, "not an FDSTv1 dataset");
  const auto count = r.get<std::uint32_t>();
  const auto ndims = r.get<std::uint32_t>();
  if (ndims == 0 || ndims > 8) fail(ErrorKind::Format, "dataset sample rank " + std::to_string(ndims) + " unsupported");
  Shape shape{count};
  for (std::uint32_t i = 0; i < ndims; ++i) shape.push_back(r.get<std::uint32_t>());
  Dataset d;
  d.class_count = r.get<std::uint32_t>();
  const std::size_t n = element_count(shape);
  r.need(n * sizeof(float) + std::size_t{count} * sizeof(std::uint16_t));
  d.features = Tensor(shape);
  for (std::size_t i = 0; i < n; ++i) d.features[i] = r.get<float>();
  d.labels.resize(count);
  for (auto& y : d.labels) y = r.get<std::uint16_t>();
  if (r.remaining() != 0) fail(ErrorKind::Format, "dataset has " + std::to_string(r.remaining()) + " trailing bytes");
  validate(d);
  return d;
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_dataset(data));
}

Dataset load_dataset(const std::filesystem::path& path) { return parse_dataset(read_file(path)); }

std::string serialize_logits(const Tensor& logits) {
  if (logits.rank() != 2) fail(ErrorKind::Shape, "logits must be [batch, classes]");
  std::string out;
  put(out, static_cast<std::uint32_t>(logits.dim(0)));
  put(out, static_cast<std::uint32_t>(logits.dim(1)));
  append_f32(out, logits);
  return out;
}

Tensor load_logits(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  Reader r(bytes, "logits");
  const auto batch = r.get<std::uint32_t>();
  const auto classes = r.get<std::uint32_t>();
  Tensor t({batch, classes});
  r.need(t.size() * sizeof(float));
  for (auto& v : t.values) v = r.get<float>();
  if (r.remaining() != 0) fail(ErrorKind::Format, "logits file has trailing bytes");
  return t;
}

// ---------------------------------------------------------------------------

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Runtime, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Runtime, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::Runtime, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    fail(ErrorKind::Runtime, "cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

}  // namespace foldkit
