#include "khn/instrument.hpp"

#include <array>
#include <cstddef>

namespace khn::instrument {
namespace {

constexpr std::size_t kOpKinds = static_cast<std::size_t>(OpKind::cross_entropy) + 1;

thread_local ScopedBranchRecorder* active_recorder = nullptr;
thread_local std::array<double, kOpKinds> fault_scale = [] {
  std::array<double, kOpKinds> scales{};
  scales.fill(1.0);
  return scales;
}();

}  // namespace

const char* op_kind_name(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::linear: return "linear";
    case OpKind::elementwise: return "elementwise";
    case OpKind::relu: return "relu";
    case OpKind::clamp_min: return "clamp_min";
    case OpKind::reduce: return "reduce";
    case OpKind::reshape: return "reshape";
    case OpKind::conv2d: return "conv2d";
    case OpKind::max_pool: return "max_pool";
    case OpKind::batch_norm: return "batch_norm";
    case OpKind::cross_entropy: return "cross_entropy";
  }
  return "unknown";
}

ScopedBranchRecorder::ScopedBranchRecorder() : previous_(active_recorder) { active_recorder = this; }

ScopedBranchRecorder::~ScopedBranchRecorder() { active_recorder = previous_; }

void ScopedBranchRecorder::mix(std::uint64_t value) noexcept {
  // FNV-1a over the 8 bytes of value
  for (int i = 0; i < 8; ++i) {
    hash_ ^= (value >> (8 * i)) & 0xffU;
    hash_ *= 0x100000001b3ULL;
  }
}

bool branch_recording_active() noexcept { return active_recorder != nullptr; }

void record_branch(std::uint64_t value) noexcept {
  if (active_recorder != nullptr) active_recorder->mix(value);
}

ScopedBackwardFault::ScopedBackwardFault(OpKind kind, double factor)
    : kind_(kind), previous_(fault_scale[static_cast<std::size_t>(kind)]) {
  fault_scale[static_cast<std::size_t>(kind)] = factor;
}

ScopedBackwardFault::~ScopedBackwardFault() { fault_scale[static_cast<std::size_t>(kind_)] = previous_; }

double backward_scale(OpKind kind) noexcept { return fault_scale[static_cast<std::size_t>(kind)]; }

}  // namespace khn::instrument
