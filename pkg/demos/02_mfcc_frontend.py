"""From a waveform to the 39-coefficient MFCC matrix the model consumes.

One second at 16 kHz with 50 ms windows and a 12.5 ms hop gives
``(16000 - 800) // 200 + 1 = 77`` frames.
"""

import numpy as np

from ctlmtnet.audio import AudioClip, compute_mfcc, mel_centers, mel_energies, pad_or_truncate

sr = 16000
t = np.arange(sr) / sr
tone = AudioClip(0.5 * np.sin(2 * np.pi * 440.0 * t), sr)

feats = compute_mfcc(tone)
print("MFCC matrix:", feats.matrix.shape, "(frames x coefficients)")

# the loudest mel band sits on 440 Hz in every frame
energies = mel_energies(tone)
band = energies.argmax(axis=1)
centres = mel_centers(sr)
print("argmax band per frame (unique):", np.unique(band), f"centre {centres[band[0]]:.1f} Hz")

# silence: the log floor keeps c0 finite, every other coefficient is zero
silent = compute_mfcc(AudioClip(np.zeros(sr), sr)).matrix
print("silent clip, max |c1..c38|:", np.abs(silent[:, 1:]).max(), " c0:", silent[0, 0])

# a gain change only moves c0, as long as no mel band sits on the log floor
# (a pure tone leaves the far bands near zero, so use broadband noise here)
noise = np.random.default_rng(0).uniform(-0.3, 0.3, sr)
quiet = compute_mfcc(AudioClip(noise, sr)).matrix
louder = compute_mfcc(AudioClip(3.0 * noise, sr)).matrix
print("noise, gain x3: max change in c1..c38:", np.abs(louder[:, 1:] - quiet[:, 1:]).max(),
      f" c0 shift {louder[0, 0] - quiet[0, 0]:.4f}")

# utterances are zero-padded or cut to a common length before batching
print("padded to 96 frames:", pad_or_truncate(feats, 96).matrix.shape)
