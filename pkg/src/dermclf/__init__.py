"""Seven-category dermoscopy classifier: transfer learning with cyclical and
discriminative learning rates, concat-pool head, test-time augmentation."""

__version__ = "0.1.0"
