//! Roll-to-audio synthesis: a classical additive synthesizer and a learned
//! midi-to-spectrogram path inverted with Griffin-Lim.

pub mod classical;
pub mod deep;
pub mod dsp;
pub mod wav;

pub use classical::{classical_synth, frames_to_samples, pitch_frequency, ClassicalParams, ExternalSynth};
pub use deep::{
    classical_pairs, deep_spectrogram, perfnet_forward, refine_spectrogram, synth_pairs, synthesize, train_perfnet,
    train_refiner, upsample_index, upsample_midi_window, PerfNet, PerfNetConfig, Refiner, SynthConfig, SynthHistory,
    SynthLog, SynthMode, SynthModels, SynthPair, MIDI_WINDOW, SPEC_STRIDE, SPEC_WINDOW, TRAIN_BINS,
};
pub use dsp::{
    griffin_lim, griffin_lim_magnitude, griffin_lim_traced, log_spectrogram, num_stft_frames, spectral_convergence,
    AudioClip, GriffinLimResult, PhaseInit, Spectrogram, Stft, DEFAULT_GL_ITERATIONS, HOP, NUM_BINS, N_FFT,
    SAMPLE_RATE,
};
pub use wav::{read_wav, write_wav};
