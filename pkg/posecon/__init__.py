"""Pose-supervised contrastive learning for weakly-supervised action segmentation."""
