"""Dermoscopic lesion classification from pre-trained CNN features.

Pipeline: ingest an ISIC-style dataset, mean-center / resize / augment the
images, embed them through fully-connected layers of pre-trained networks,
train calibrated one-vs-rest kernel SVMs per (network, layer), fuse the class
probabilities by averaging, and evaluate the melanoma and seborrheic
keratosis binary tasks with thresholded accuracy and AUC.
"""

__version__ = "0.1.0"
