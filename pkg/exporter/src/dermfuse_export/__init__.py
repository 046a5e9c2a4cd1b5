"""One-shot exporter: torchvision AlexNet/VGG-16 to fc6/fc7/fc8 ONNX files."""

__version__ = "0.1.0"
