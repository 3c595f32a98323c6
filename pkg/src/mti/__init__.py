"""Single-task and multitask image-to-images translation on multimodal brain MRI slices."""

__version__ = "0.1.0"
