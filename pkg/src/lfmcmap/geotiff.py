"""Minimal GeoTIFF I/O.

Covers exactly what the pipeline needs without a GDAL dependency:

* writing float32/int16 rasters as tiled (256x256), deflate-compressed,
  little-endian classic TIFF with the GeoTIFF tags for north-up grids in
  EPSG:4326 or UTM, a nodata tag, and optional key/value metadata;
* reading striped or tiled classic TIFFs (uncompressed or deflate,
  chunky interleave, no predictor), which includes everything we write
  plus typical single-band exports.

Writing is a pure function of its arguments, so outputs are byte-stable
across runs and thread counts.
"""
from __future__ import annotations

import struct
import zlib
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import DataError
from .geo import GridSpec, _parse_crs

_TILE = 256

# TIFF data types used here.
_ASCII, _SHORT, _LONG, _DOUBLE = 2, 3, 4, 12
_TYPE_SIZE = {_ASCII: 1, _SHORT: 2, _LONG: 4, _DOUBLE: 8}

_TAG_GDAL_METADATA = 42112
_TAG_GDAL_NODATA = 42113


def _geokey_directory(crs: str):
    kind, zone, north = _parse_crs(crs)
    if kind == "geographic":
        keys = [(1024, 0, 1, 2), (1025, 0, 1, 1), (2048, 0, 1, 4326)]
    else:
        epsg = (32600 if north else 32700) + zone
        keys = [(1024, 0, 1, 1), (1025, 0, 1, 1), (3072, 0, 1, epsg)]
    directory = [1, 1, 0, len(keys)]
    for key in keys:
        directory.extend(key)
    return directory


def write_geotiff(path, array: np.ndarray, grid: GridSpec,
                  nodata: Optional[float] = None,
                  metadata: Optional[Dict[str, str]] = None,
                  compress_level: int = 6) -> None:
    """Write a (H, W) or (bands, H, W) array as a tiled GeoTIFF."""
    if array.ndim == 2:
        array = array[np.newaxis, :, :]
    if array.ndim != 3:
        raise DataError(f"expected 2D or 3D array, got shape {array.shape}")
    bands, height, width = array.shape
    if (height, width) != (grid.height, grid.width):
        raise DataError(f"array shape {height}x{width} does not match grid "
                        f"{grid.height}x{grid.width}")
    if array.dtype == np.float32:
        sample_format, bits = 3, 32
    elif array.dtype == np.int16:
        sample_format, bits = 2, 16
    else:
        raise DataError(f"unsupported dtype {array.dtype} (use float32 or int16)")

    tile_w = tile_h = _TILE
    tiles_across = (width + tile_w - 1) // tile_w
    tiles_down = (height + tile_h - 1) // tile_h
    pad_value = array.dtype.type(nodata if nodata is not None else 0)

    # Pixel-interleaved tiles, row-major tile order, deflate-compressed.
    tile_blobs = []
    interleaved = np.ascontiguousarray(np.moveaxis(array, 0, -1))  # (H, W, B)
    for ty in range(tiles_down):
        for tx in range(tiles_across):
            block = np.full((tile_h, tile_w, bands), pad_value, dtype=array.dtype)
            ys = slice(ty * tile_h, min((ty + 1) * tile_h, height))
            xs = slice(tx * tile_w, min((tx + 1) * tile_w, width))
            block[: ys.stop - ys.start, : xs.stop - xs.start] = interleaved[ys, xs]
            tile_blobs.append(zlib.compress(block.tobytes(), compress_level))

    entries = [
        (256, _LONG, 1, [width]),
        (257, _LONG, 1, [height]),
        (258, _SHORT, bands, [bits] * bands),
        (259, _SHORT, 1, [8]),              # Adobe deflate
        (262, _SHORT, 1, [1]),              # BlackIsZero
        (277, _SHORT, 1, [bands]),
        (284, _SHORT, 1, [1]),              # chunky interleave
        (322, _SHORT, 1, [tile_w]),
        (323, _SHORT, 1, [tile_h]),
        (324, _LONG, len(tile_blobs), None),     # offsets patched below
        (325, _LONG, len(tile_blobs), [len(b) for b in tile_blobs]),
        (339, _SHORT, bands, [sample_format] * bands),
        (33550, _DOUBLE, 3, [grid.pixel_size_x, grid.pixel_size_y, 0.0]),
        (33922, _DOUBLE, 6, [0.0, 0.0, 0.0, grid.origin_x, grid.origin_y, 0.0]),
    ]
    if bands > 1:
        entries.append((338, _SHORT, bands - 1, [0] * (bands - 1)))
    geokeys = _geokey_directory(grid.crs)
    entries.append((34735, _SHORT, len(geokeys), geokeys))
    if metadata:
        items = "".join(f'<Item name="{k}">{v}</Item>'
                        for k, v in sorted(metadata.items()))
        xml = f"<GDALMetadata>{items}</GDALMetadata>\x00"
        entries.append((_TAG_GDAL_METADATA, _ASCII, len(xml), xml.encode("ascii")))
    if nodata is not None:
        text = f"{nodata:.17g}\x00"
        entries.append((_TAG_GDAL_NODATA, _ASCII, len(text), text.encode("ascii")))
    entries.sort(key=lambda e: e[0])

    # Layout: header | tile data | IFD | out-of-line values.
    header_size = 8
    data_offset = header_size
    tile_offsets = []
    for blob in tile_blobs:
        tile_offsets.append(data_offset)
        data_offset += len(blob)
    if data_offset % 2:
        data_offset += 1
    ifd_offset = data_offset
    ifd_size = 2 + 12 * len(entries) + 4
    extra_offset = ifd_offset + ifd_size

    def encode_values(type_id, values):
        if type_id == _ASCII:
            return bytes(values)
        fmt = {_SHORT: "H", _LONG: "I", _DOUBLE: "d"}[type_id]
        return struct.pack("<" + fmt * len(values), *values)

    ifd = struct.pack("<H", len(entries))
    extra = b""
    for tag, type_id, count, values in entries:
        if tag == 324:
            values = tile_offsets
        payload = encode_values(type_id, values)
        if len(payload) <= 4:
            value_field = payload.ljust(4, b"\x00")
        else:
            if (extra_offset + len(extra)) % 2:
                extra += b"\x00"
            value_field = struct.pack("<I", extra_offset + len(extra))
            extra += payload
        ifd += struct.pack("<HHI", tag, type_id, count) + value_field
    ifd += struct.pack("<I", 0)  # no next IFD

    with open(path, "wb") as fh:
        fh.write(struct.pack("<2sHI", b"II", 42, ifd_offset))
        for blob in tile_blobs:
            fh.write(blob)
        if fh.tell() % 2:
            fh.write(b"\x00")
        fh.write(ifd)
        fh.write(extra)


def _read_entry_values(fh, byte_order, type_id, count, value_field):
    size = _TYPE_SIZE.get(type_id)
    if size is None:
        return None
    total = size * count
    if total <= 4:
        raw = value_field[:total]
    else:
        (offset,) = struct.unpack(byte_order + "I", value_field)
        pos = fh.tell()
        fh.seek(offset)
        raw = fh.read(total)
        fh.seek(pos)
    if type_id == _ASCII:
        return raw
    fmt = {_SHORT: "H", _LONG: "I", _DOUBLE: "d"}[type_id]
    return list(struct.unpack(byte_order + fmt * count, raw))


def _crs_from_geokeys(geokeys) -> str:
    if not geokeys or len(geokeys) < 4:
        raise DataError("GeoTIFF missing GeoKey directory")
    keys = {}
    for i in range(4, 4 + 4 * geokeys[3], 4):
        key_id, location, _, value = geokeys[i:i + 4]
        if location == 0:
            keys[key_id] = value
    model = keys.get(1024)
    if model == 2:
        epsg = keys.get(2048, 4326)
    elif model == 1:
        epsg = keys.get(3072)
    else:
        raise DataError(f"unsupported GeoTIFF model type {model}")
    if epsg in (None, 32767):
        raise DataError("GeoTIFF carries a user-defined CRS with no EPSG code")
    return f"EPSG:{epsg}"


def read_geotiff(path) -> Tuple[np.ndarray, GridSpec, Optional[float]]:
    """Read a GeoTIFF; returns (array (bands, H, W), grid, nodata)."""
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8:
            raise DataError(f"{path}: not a TIFF file")
        if head[:2] == b"II":
            bo = "<"
        elif head[:2] == b"MM":
            bo = ">"
        else:
            raise DataError(f"{path}: not a TIFF file")
        magic, ifd_offset = struct.unpack(bo + "HI", head[2:8])
        if magic == 43:
            raise DataError(f"{path}: BigTIFF is not supported")
        if magic != 42:
            raise DataError(f"{path}: not a TIFF file")

        fh.seek(ifd_offset)
        (n_entries,) = struct.unpack(bo + "H", fh.read(2))
        tags = {}
        for _ in range(n_entries):
            tag, type_id, count = struct.unpack(bo + "HHI", fh.read(8))
            value_field = fh.read(4)
            tags[tag] = _read_entry_values(fh, bo, type_id, count, value_field)

        width = tags[256][0]
        height = tags[257][0]
        bands = tags.get(277, [1])[0]
        bits = tags.get(258, [1])[0]
        compression = tags.get(259, [1])[0]
        sample_format = tags.get(339, [1])[0]
        planar = tags.get(284, [1])[0]
        predictor = tags.get(317, [1])[0]
        if planar != 1:
            raise DataError(f"{path}: planar (band-sequential) TIFFs are not supported")
        if predictor != 1:
            raise DataError(f"{path}: TIFF predictor {predictor} is not supported")
        if compression not in (1, 8, 32946):
            raise DataError(f"{path}: unsupported TIFF compression {compression}")

        dtype = {
            (1, 8): np.uint8, (1, 16): np.uint16, (1, 32): np.uint32,
            (2, 8): np.int8, (2, 16): np.int16, (2, 32): np.int32,
            (3, 32): np.float32, (3, 64): np.float64,
        }.get((sample_format, bits))
        if dtype is None:
            raise DataError(f"{path}: unsupported sample format {sample_format}/{bits}-bit")
        dtype = np.dtype(dtype).newbyteorder(bo)

        out = np.zeros((height, width, bands), dtype=dtype)

        def decode(raw):
            return zlib.decompress(raw) if compression != 1 else raw

        if 324 in tags:  # tiled
            tile_w = tags[322][0]
            tile_h = tags[323][0]
            offsets, counts = tags[324], tags[325]
            tiles_across = (width + tile_w - 1) // tile_w
            for idx, (off, cnt) in enumerate(zip(offsets, counts)):
                fh.seek(off)
                block = np.frombuffer(decode(fh.read(cnt)), dtype=dtype)
                block = block.reshape(tile_h, tile_w, bands)
                ty, tx = divmod(idx, tiles_across)
                ys = slice(ty * tile_h, min((ty + 1) * tile_h, height))
                xs = slice(tx * tile_w, min((tx + 1) * tile_w, width))
                out[ys, xs] = block[: ys.stop - ys.start, : xs.stop - xs.start]
        elif 273 in tags:  # striped
            rows_per_strip = tags.get(278, [height])[0]
            offsets, counts = tags[273], tags[279]
            for idx, (off, cnt) in enumerate(zip(offsets, counts)):
                fh.seek(off)
                y0 = idx * rows_per_strip
                n_rows = min(rows_per_strip, height - y0)
                strip = np.frombuffer(decode(fh.read(cnt)), dtype=dtype)
                out[y0:y0 + n_rows] = strip.reshape(n_rows, width, bands)
        else:
            raise DataError(f"{path}: TIFF has neither strips nor tiles")

        scale = tags.get(33550)
        tiepoint = tags.get(33922)
        if scale is None or tiepoint is None:
            raise DataError(f"{path}: missing georeferencing tags")
        i, j = tiepoint[0], tiepoint[1]
        origin_x = tiepoint[3] - i * scale[0]
        origin_y = tiepoint[4] + j * scale[1]
        grid = GridSpec(origin_x=origin_x, origin_y=origin_y,
                        pixel_size_x=scale[0], pixel_size_y=scale[1],
                        height=height, width=width,
                        crs=_crs_from_geokeys(tags.get(34735)))

        nodata = None
        if _TAG_GDAL_NODATA in tags:
            text = tags[_TAG_GDAL_NODATA].split(b"\x00")[0].decode("ascii").strip()
            if text:
                nodata = float(text)

    return np.moveaxis(out, -1, 0), grid, nodata
