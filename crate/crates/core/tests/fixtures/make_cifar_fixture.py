#!/usr/bin/env python3
"""Writes cifar_fixture.bin: four CIFAR-10 binary records with known bytes.

Record i has label (3 * i + 1) % 10 and pixel byte p (0..3071, R plane then
G then B, row-major 32x32) equal to (i * 31 + p * 7 + p // 1024) % 256.
"""
import pathlib

RECORDS = 4
PIXELS = 3 * 32 * 32

out = bytearray()
for i in range(RECORDS):
    out.append((3 * i + 1) % 10)
    out.extend((i * 31 + p * 7 + p // 1024) % 256 for p in range(PIXELS))

path = pathlib.Path(__file__).with_name("cifar_fixture.bin")
path.write_bytes(bytes(out))
print(f"wrote {len(out)} bytes to {path}")
