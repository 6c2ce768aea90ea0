#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "culab/autodiff.h"
#include "culab/tensor.h"

namespace culab {

enum class Activation : std::uint8_t { kRelu = 0, kTanh = 1 };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

// Shape of the classifier: input -> hidden... -> embedding (unit-norm) -> logits.
struct ModelArchitecture {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden;
  std::size_t embedding_dim = 0;
  std::size_t num_classes = 0;
  Activation activation = Activation::kRelu;

  // Throws ValidationError listing every violated field.
  void validate() const;
  bool operator==(const ModelArchitecture&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor value;
  bool operator==(const NamedTensor&) const = default;
};

// All trainable weights of the encoder and head, in layer order:
//   enc.<i>.weight [in x out], enc.<i>.bias [1 x out] for each hidden layer,
//   enc.proj.weight / enc.proj.bias for the embedding projection,
//   head.weight [d x C], head.bias [1 x C].
struct ModelParameters {
  ModelArchitecture arch;
  std::vector<NamedTensor> tensors;

  // Throws IntegrityError if names or shapes do not chain per `arch`.
  void check_integrity() const;

  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;

  bool operator==(const ModelParameters&) const = default;
};

ModelParameters init_parameters(const ModelArchitecture& arch, std::uint64_t seed);

// Parameters bound to a tape as differentiable inputs.
struct BoundModel {
  const ModelArchitecture* arch = nullptr;
  std::vector<ad::Var> params;
};

BoundModel bind(ad::Tape& tape, const ModelParameters& params);

// Unit-norm embeddings [B x d].
ad::Var encode(const BoundModel& model, ad::Var x);
// Logits [B x C] from embeddings.
ad::Var head(const BoundModel& model, ad::Var embeddings);

Tensor encode(const ModelParameters& params, const Tensor& x);
Tensor forward(const ModelParameters& params, const Tensor& x);

// Argmax per row; ties go to the lowest class index.
std::vector<int> argmax_rows(const Tensor& logits);
std::vector<int> predict(const ModelParameters& params, const Tensor& x);

// Binary checkpoint (little-endian):
//   magic "CULABCKP", u32 version,
//   u64 input_dim, u64 n_hidden, u64 hidden[n_hidden], u64 d, u64 C, u8 activation,
//   u64 n_tensors, then per tensor: u64 name_len, name bytes, u64 rank,
//   u64 dims[rank], f64 payload[numel].
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ModelParameters& params, const std::filesystem::path& path);
ModelParameters load_checkpoint(const std::filesystem::path& path);

}  // namespace culab
