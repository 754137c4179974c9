#pragma once

#include <cstdint>
#include <string>

// Hooks used by the gradient checker and its tests. Both are thread-local
// and inactive unless a scoped guard is alive on the calling thread.
namespace khn::instrument {

enum class OpKind { matmul, linear, elementwise, relu, clamp_min, reduce, reshape, conv2d, max_pool, batch_norm, cross_entropy };

const char* op_kind_name(OpKind kind);

// Accumulates a hash of every discrete decision taken by piecewise ops
// (ReLU sign pattern, clamp branch, max-pool argmax). Two forward passes
// with equal signatures ran through the same smooth piece.
class ScopedBranchRecorder {
 public:
  ScopedBranchRecorder();
  ~ScopedBranchRecorder();
  ScopedBranchRecorder(const ScopedBranchRecorder&) = delete;
  ScopedBranchRecorder& operator=(const ScopedBranchRecorder&) = delete;

  std::uint64_t signature() const noexcept { return hash_; }
  void reset() noexcept { hash_ = kSeed; }
  void mix(std::uint64_t value) noexcept;

 private:
  static constexpr std::uint64_t kSeed = 0xcbf29ce484222325ULL;
  std::uint64_t hash_ = kSeed;
  ScopedBranchRecorder* previous_;
};

bool branch_recording_active() noexcept;
void record_branch(std::uint64_t value) noexcept;

// Scales every gradient produced by the backward rule of `kind`. Exists so
// tests can verify that the gradient checker notices a broken rule.
class ScopedBackwardFault {
 public:
  ScopedBackwardFault(OpKind kind, double factor);
  ~ScopedBackwardFault();
  ScopedBackwardFault(const ScopedBackwardFault&) = delete;
  ScopedBackwardFault& operator=(const ScopedBackwardFault&) = delete;

 private:
  OpKind kind_;
  double previous_;
};

double backward_scale(OpKind kind) noexcept;

}  // namespace khn::instrument
