#ifndef SEMDISTILL_CHANNEL_HPP
#define SEMDISTILL_CHANNEL_HPP

#include "semdistill/common.hpp"
#include "semdistill/tensor.hpp"

namespace semdistill {

// Real-equivalent noisy link: y = H*x + n with n iid zero-mean Gaussian of
// variance noise_variance per element. H stays 1.0 for AWGN.
struct ChannelState {
  double snr_db = 0.0;
  double noise_variance = 1.0;
  double gain = 1.0;
};

struct SnrRange {
  double low_db = 0.0;
  double high_db = 0.0;
};

// SNR inputs above this are clamped when building a state; the noise floor
// then stays strictly positive.
constexpr double kMaxSnrDb = 40.0;

// signal_power * 10^(-snr_db/10).
double snr_to_noise_variance(double snr_db, double signal_power);

ChannelState awgn_state(double snr_db, double signal_power = 1.0);

// Scale the whole block to unit mean element power. Direction preserved.
Tensor normalize_power(const Tensor& x);

// H*x + noise. Draws size(x) normals from rng, except when noise_variance is
// exactly zero, in which case no draws happen and the output is H*x exactly.
Tensor apply_awgn(const Tensor& x, const ChannelState& state, Rng& rng);

double sample_snr(const SnrRange& range, Rng& rng);

}  // namespace semdistill

#endif  // SEMDISTILL_CHANNEL_HPP
