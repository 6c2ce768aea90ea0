#include "culab/model.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "culab/error.h"
#include "culab/rng.h"

namespace culab {

std::string to_string(Activation a) { return a == Activation::kTanh ? "tanh" : "relu"; }

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "tanh") return Activation::kTanh;
  throw ValidationError("unknown activation '" + s + "' (expected relu or tanh)");
}

void ModelArchitecture::validate() const {
  std::vector<std::string> problems;
  if (input_dim < 1) problems.push_back("input_dim must be >= 1");
  if (hidden.empty()) problems.push_back("hidden must list at least one layer");
  for (std::size_t i = 0; i < hidden.size(); ++i)
    if (hidden[i] < 1) problems.push_back("hidden[" + std::to_string(i) + "] must be >= 1");
  if (embedding_dim < 1) problems.push_back("embedding_dim must be >= 1");
  if (num_classes < 1) problems.push_back("num_classes must be >= 1");
  if (!problems.empty()) {
    std::string msg = "invalid architecture:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ValidationError(msg);
  }
}

namespace {

struct LayerSpec {
  std::string name;
  std::size_t in, out;
};

std::vector<LayerSpec> layer_specs(const ModelArchitecture& arch) {
  std::vector<LayerSpec> layers;
  std::size_t width = arch.input_dim;
  for (std::size_t i = 0; i < arch.hidden.size(); ++i) {
    layers.push_back({"enc." + std::to_string(i), width, arch.hidden[i]});
    width = arch.hidden[i];
  }
  layers.push_back({"enc.proj", width, arch.embedding_dim});
  layers.push_back({"head", arch.embedding_dim, arch.num_classes});
  return layers;
}

}  // namespace

void ModelParameters::check_integrity() const {
  arch.validate();
  auto specs = layer_specs(arch);
  if (tensors.size() != 2 * specs.size()) {
    throw IntegrityError("expected " + std::to_string(2 * specs.size()) + " tensors for architecture, found " +
                         std::to_string(tensors.size()));
  }
  for (std::size_t l = 0; l < specs.size(); ++l) {
    const auto& w = tensors[2 * l];
    const auto& b = tensors[2 * l + 1];
    const Shape ws{specs[l].in, specs[l].out};
    const Shape bs{1, specs[l].out};
    if (w.name != specs[l].name + ".weight" || w.value.shape() != ws) {
      throw IntegrityError("tensor '" + w.name + "' " + shape_string(w.value.shape()) + " does not chain; expected '" +
                           specs[l].name + ".weight' " + shape_string(ws));
    }
    if (b.name != specs[l].name + ".bias" || b.value.shape() != bs) {
      throw IntegrityError("tensor '" + b.name + "' " + shape_string(b.value.shape()) + " does not chain; expected '" +
                           specs[l].name + ".bias' " + shape_string(bs));
    }
  }
}

Tensor& ModelParameters::get(const std::string& name) {
  for (auto& t : tensors)
    if (t.name == name) return t.value;
  throw ContractError("no parameter named '" + name + "'");
}

const Tensor& ModelParameters::get(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t.value;
  throw ContractError("no parameter named '" + name + "'");
}

ModelParameters init_parameters(const ModelArchitecture& arch, std::uint64_t seed) {
  arch.validate();
  ModelParameters p;
  p.arch = arch;
  Rng rng = make_rng(seed, "init");
  for (const auto& spec : layer_specs(arch)) {
    const double s = std::sqrt(6.0 / static_cast<double>(spec.in + spec.out));
    std::uniform_real_distribution<double> dist(-s, s);
    Tensor w({spec.in, spec.out});
    for (auto& v : w.values()) v = dist(rng);
    p.tensors.push_back({spec.name + ".weight", std::move(w)});
    p.tensors.push_back({spec.name + ".bias", Tensor::zeros({1, spec.out})});
  }
  return p;
}

BoundModel bind(ad::Tape& tape, const ModelParameters& params) {
  BoundModel m;
  m.arch = &params.arch;
  m.params.reserve(params.tensors.size());
  for (const auto& t : params.tensors) m.params.push_back(tape.input(t.value));
  return m;
}

ad::Var encode(const BoundModel& model, ad::Var x) {
  const auto& arch = *model.arch;
  if (x.value().rank() != 2 || x.value().cols() != arch.input_dim) {
    throw DimensionError("encode: input " + shape_string(x.shape()) + " does not match input_dim " +
                         std::to_string(arch.input_dim));
  }
  ad::Var h = x;
  const std::size_t n_hidden = arch.hidden.size();
  for (std::size_t i = 0; i < n_hidden; ++i) {
    h = ad::add_row_bias(ad::matmul(h, model.params[2 * i]), model.params[2 * i + 1]);
    h = arch.activation == Activation::kTanh ? ad::tanh(h) : ad::relu(h);
  }
  h = ad::add_row_bias(ad::matmul(h, model.params[2 * n_hidden]), model.params[2 * n_hidden + 1]);
  return ad::l2_normalize_rows(h);
}

ad::Var head(const BoundModel& model, ad::Var embeddings) {
  const std::size_t k = model.params.size();
  return ad::add_row_bias(ad::matmul(embeddings, model.params[k - 2]), model.params[k - 1]);
}

Tensor encode(const ModelParameters& params, const Tensor& x) {
  ad::Tape tape;
  BoundModel m;
  m.arch = &params.arch;
  for (const auto& t : params.tensors) m.params.push_back(tape.constant(t.value));
  return encode(m, tape.constant(x)).value();
}

Tensor forward(const ModelParameters& params, const Tensor& x) {
  ad::Tape tape;
  BoundModel m;
  m.arch = &params.arch;
  for (const auto& t : params.tensors) m.params.push_back(tape.constant(t.value));
  return head(m, encode(m, tape.constant(x))).value();
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t m = logits.rows(), n = logits.cols();
  std::vector<int> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j)
      if (logits(i, j) > logits(i, best)) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> predict(const ModelParameters& params, const Tensor& x) { return argmax_rows(forward(params, x)); }

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace {

constexpr char kMagic[8] = {'C', 'U', 'L', 'A', 'B', 'C', 'K', 'P'};

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const char* p, std::size_t n) { buf_.append(p, n); }
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  // Guards length fields before they drive allocations.
  std::uint64_t count(std::uint64_t max, const char* what) {
    auto v = u64();
    if (v > max) throw IntegrityError(std::string("checkpoint field '") + what + "' out of range");
    return v;
  }
  bool at_end() const { return pos_ == data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) {
    if (data_.size() - pos_ < n) throw IntegrityError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const ModelParameters& params, const std::filesystem::path& path) {
  params.check_integrity();
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.u32(kCheckpointVersion);
  const auto& a = params.arch;
  w.u64(a.input_dim);
  w.u64(a.hidden.size());
  for (auto h : a.hidden) w.u64(h);
  w.u64(a.embedding_dim);
  w.u64(a.num_classes);
  w.u8(static_cast<std::uint8_t>(a.activation));
  w.u64(params.tensors.size());
  for (const auto& t : params.tensors) {
    w.u64(t.name.size());
    w.bytes(t.name.data(), t.name.size());
    w.u64(t.value.rank());
    for (auto d : t.value.shape()) w.u64(d);
    for (double v : t.value.values()) w.f64(v);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open checkpoint for writing: " + path.string());
  out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
  if (!out) throw Error("failed writing checkpoint: " + path.string());
}

ModelParameters load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Reader r(std::move(data));
  if (r.remaining() < sizeof(kMagic) || r.str(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
    throw FormatError("not a checkpoint file (bad magic): " + path.string());
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  constexpr std::uint64_t kMaxDim = 1u << 24;
  ModelParameters p;
  p.arch.input_dim = r.count(kMaxDim, "input_dim");
  const auto n_hidden = r.count(1024, "n_hidden");
  for (std::uint64_t i = 0; i < n_hidden; ++i) p.arch.hidden.push_back(r.count(kMaxDim, "hidden"));
  p.arch.embedding_dim = r.count(kMaxDim, "embedding_dim");
  p.arch.num_classes = r.count(kMaxDim, "num_classes");
  const auto act = r.u8();
  if (act > 1) throw FormatError("unknown activation tag " + std::to_string(act));
  p.arch.activation = static_cast<Activation>(act);

  const auto n_tensors = r.count(4096, "n_tensors");
  for (std::uint64_t t = 0; t < n_tensors; ++t) {
    NamedTensor nt;
    nt.name = r.str(r.count(4096, "name_len"));
    const auto rank = r.count(8, "rank");
    if (rank == 0) throw IntegrityError("tensor '" + nt.name + "' has rank 0");
    Shape shape(rank);
    for (auto& d : shape) {
      d = r.count(kMaxDim, "dim");
      if (d == 0) throw IntegrityError("tensor '" + nt.name + "' has a zero dimension");
    }
    const auto numel = shape_numel(shape);
    if (numel * 8 > r.remaining()) throw IntegrityError("checkpoint truncated inside tensor '" + nt.name + "'");
    std::vector<double> values(numel);
    for (auto& v : values) v = r.f64();
    nt.value = Tensor(std::move(shape), std::move(values));
    p.tensors.push_back(std::move(nt));
  }
  if (!r.at_end()) throw IntegrityError("trailing bytes after checkpoint payload");
  try {
    p.check_integrity();
  } catch (const ValidationError& e) {
    throw IntegrityError(std::string("checkpoint architecture invalid: ") + e.what());
  }
  return p;
}

}  // namespace culab
