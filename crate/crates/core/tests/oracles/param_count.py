"""Walks the segmentation network layer list and counts parameters.

Encoder level l: 3x3x3 conv (c_{l-1} -> c_l), then a stride-2 3x3x3 conv
(c_l -> c_l) between levels. Decoder level l (deepest first, skipping the
bottom): upsample, concat skip (c_{l+1} + c_l) -> 3x3x3 conv -> c_l. Head:
1x1x1 conv c_0 -> K.
"""
import sys


def conv(cin, cout, k):
    return cout * cin * k ** 3 + cout


def count(cin, k_classes, channels, k=3):
    total = 0
    prev = cin
    for i, c in enumerate(channels):
        total += conv(prev, c, k)
        if i + 1 < len(channels):
            total += conv(c, c, k)
        prev = c
    for i in reversed(range(len(channels) - 1)):
        total += conv(channels[i + 1] + channels[i], channels[i], k)
    total += conv(channels[0], k_classes, 1)
    return total


if __name__ == "__main__":
    print(count(1, 2, [8, 16, 32]))
    print(count(1, 3, [4, 8]))
