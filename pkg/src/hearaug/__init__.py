"""Own-voice data augmentation for hearables with outer and inner microphones."""

__version__ = "0.1.0"
