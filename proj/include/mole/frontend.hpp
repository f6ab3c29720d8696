#pragma once

#include <string>
#include <vector>

#include "mole/tensor.hpp"

namespace mole {

// 80-dimensional log-Mel filter-bank energies: 25 ms Hann window, 10 ms
// hop, 16 kHz input, natural log with floor epsilon 1e-10.
struct LogMelOptions {
    int sample_rate = 16000;
    int window = 400;  // 25 ms
    int hop = 160;     // 10 ms
    int fft = 512;
    int mel_bins = 80;
    double fmin = 0.0;
    double fmax = 8000.0;
    double floor_eps = 1e-10;
};

// samples normalized to [-1, 1], mono. ContractError on a wrong rate,
// too-short error for fewer samples than one window.
Tensor logmel(const std::vector<double>& samples, int sample_rate, const LogMelOptions& opts = {});

// Triangular filter center frequencies in Hz (HTK mel scale); exposed so
// tests can locate the expected peak bin independently.
std::vector<double> mel_filter_centers(const LogMelOptions& opts = {});

struct WavData {
    std::vector<double> samples;  // [-1, 1]
    int sample_rate = 0;
};

// Minimal RIFF/WAVE reader, PCM16 mono only.
WavData read_wav_pcm16_mono(const std::string& path);

}  // namespace mole
