#ifndef DESTRESS_RNG_HPP
#define DESTRESS_RNG_HPP

#include <cstdint>
#include <random>

namespace destress::rng {

// Named sub-streams carved out of one experiment seed. Keeping every consumer
// on its own stream means e.g. changing the agent count cannot perturb the
// draws seen by other agents or by the data generator.
enum class StreamTag : std::uint32_t {
  kTopology = 1,
  kData = 2,
  kPartition = 3,
  kHoldout = 4,
  kMinibatch = 5,
  kOutput = 6,
  kInit = 7,
};

// std::seed_seq expansion is fully specified by the standard, so streams are
// reproducible across runs for a fixed (seed, tag, stream_id).
inline std::mt19937_64 make_stream(std::uint64_t seed, StreamTag tag,
                                   std::uint64_t stream_id = 0) {
  std::seed_seq seq{
      static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
      static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(stream_id),
      static_cast<std::uint32_t>(stream_id >> 32)};
  return std::mt19937_64(seq);
}

// Per-agent minibatch stream: agent i draws only from agent_stream(seed, i).
inline std::mt19937_64 agent_stream(std::uint64_t seed, int agent) {
  return make_stream(seed, StreamTag::kMinibatch,
                     static_cast<std::uint64_t>(agent));
}

}  // namespace destress::rng

#endif  // DESTRESS_RNG_HPP
