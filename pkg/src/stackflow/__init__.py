"""Container-native workflow engine for staged fetal brain MRI pipelines."""

__version__ = "0.1.0"
