#include "switch_sae/model.hpp"

namespace ssae {

std::string to_string(ArchKind kind) {
  switch (kind) {
    case ArchKind::TopK: return "topk";
    case ArchKind::ReLU: return "relu";
    case ArchKind::Switch: return "switch";
  }
  return "unknown";
}

ArchKind arch_from_string(const std::string& name) {
  if (name == "topk") return ArchKind::TopK;
  if (name == "relu") return ArchKind::ReLU;
  if (name == "switch") return ArchKind::Switch;
  throw std::invalid_argument("unknown architecture '" + name + "' (expected topk, relu or switch)");
}

FlopReport flops_per_activation(const ArchDescriptor& arch) {
  FlopReport r;
  const std::uint64_t d = arch.d;
  switch (arch.kind) {
    case ArchKind::TopK:
      r.encoder_flops = 2 * arch.width * d;
      r.decoder_flops = 2 * arch.k * d;
      r.bias_flops = 2 * d;
      break;
    case ArchKind::ReLU:
      // Latents may be dense, so the decoder touches every column.
      r.encoder_flops = 2 * arch.width * d;
      r.decoder_flops = 2 * arch.width * d;
      r.bias_flops = 2 * d;
      break;
    case ArchKind::Switch: {
      const std::uint64_t n = arch.experts == 0 ? 1 : arch.experts;
      r.encoder_flops = 2 * (arch.width / n) * d;
      r.router_flops = 2 * n * d;
      r.decoder_flops = 2 * arch.k * d;
      r.bias_flops = 3 * d;  // b_router subtract, b_pre subtract and add
      break;
    }
  }
  r.total_flops = r.encoder_flops + r.router_flops + r.decoder_flops + r.bias_flops;
  return r;
}

}  // namespace ssae
