"""Runnable artifact around the model: scenes, config, training, CLI."""
