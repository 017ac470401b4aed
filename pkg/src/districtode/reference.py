"""District forecast tables for 2026 and 2030 (Odisha, 30 districts).

Published reference values, three decimals. Used to check output layout and
plausibility ranges of forecasts, never as exact targets.
"""

from __future__ import annotations

INDICATORS = ("toilet", "piped_water", "lpg", "pucca_house", "electricity", "education_secondary")

_T2026 = """\
Angul         0.865 0.382 0.556 0.846 0.994 0.297
Balangir      0.858 0.470 0.617 0.805 0.997 0.231
Baleshwar     0.851 0.401 0.500 0.652 0.993 0.293
Bargarh       0.813 0.467 0.579 0.799 0.995 0.251
Baudh         0.891 0.329 0.606 0.755 0.997 0.226
Bhadrak       0.852 0.248 0.475 0.640 0.995 0.306
Cuttack       0.853 0.608 0.727 0.911 0.995 0.340
Debagarh      0.844 0.329 0.460 0.661 0.992 0.259
Dhenkanal     0.786 0.346 0.571 0.798 0.993 0.283
Gajapati      0.810 0.567 0.601 0.851 0.994 0.198
Ganjam        0.890 0.771 0.844 0.956 0.998 0.293
Jagatsinghpur 0.863 0.434 0.597 0.891 0.997 0.335
Jajapur       0.807 0.276 0.525 0.821 0.994 0.330
Jharsuguda    0.845 0.475 0.672 0.830 0.992 0.343
Kalahandi     0.910 0.358 0.604 0.728 0.994 0.258
Kendrapara    0.844 0.357 0.547 0.787 0.996 0.318
Kendujhar     0.737 0.391 0.504 0.652 0.982 0.264
Khandamal     0.901 0.304 0.556 0.788 0.996 0.247
Khordha       0.909 0.702 0.850 0.940 0.997 0.414
Koraput       0.717 0.438 0.551 0.744 0.988 0.198
Malkangiri    0.860 0.347 0.490 0.684 0.997 0.172
Mayurbhanj    0.771 0.335 0.384 0.484 0.982 0.245
Nabarangapur  0.827 0.365 0.460 0.644 0.992 0.186
Nayagarh      0.908 0.536 0.749 0.911 0.999 0.270
Nuapada       0.830 0.310 0.505 0.741 0.995 0.211
Puri          0.916 0.506 0.696 0.922 0.998 0.348
Rayagada      0.856 0.610 0.626 0.813 0.995 0.192
Sambalpur     0.836 0.573 0.660 0.778 0.991 0.297
Sonapur       0.885 0.373 0.682 0.829 0.998 0.277
Sundargarh    0.856 0.529 0.661 0.790 0.991 0.329
"""

_T2030 = """\
Angul         0.945 0.524 0.748 0.923 0.998 0.362
Balangir      0.949 0.615 0.798 0.909 0.999 0.288
Baleshwar     0.931 0.521 0.680 0.792 0.998 0.346
Bargarh       0.925 0.603 0.762 0.901 0.999 0.306
Baudh         0.962 0.483 0.800 0.884 0.999 0.289
Bhadrak       0.938 0.360 0.671 0.792 0.999 0.365
Cuttack       0.936 0.718 0.853 0.954 0.999 0.398
Debagarh      0.938 0.464 0.670 0.811 0.998 0.317
Dhenkanal     0.905 0.479 0.751 0.892 0.998 0.343
Gajapati      0.924 0.702 0.785 0.929 0.999 0.248
Ganjam        0.958 0.848 0.925 0.980 1.000 0.348
Jagatsinghpur 0.944 0.577 0.780 0.946 0.999 0.405
Jajapur       0.914 0.398 0.713 0.906 0.998 0.395
Jharsuguda    0.931 0.602 0.814 0.910 0.998 0.405
Kalahandi     0.969 0.515 0.801 0.864 0.999 0.323
Kendrapara    0.935 0.493 0.736 0.889 0.999 0.381
Kendujhar     0.874 0.512 0.681 0.794 0.995 0.315
Khandamal     0.967 0.460 0.776 0.900 0.999 0.310
Khordha       0.962 0.787 0.922 0.970 0.999 0.469
Koraput       0.875 0.573 0.736 0.866 0.997 0.245
Malkangiri    0.953 0.488 0.717 0.834 0.999 0.222
Mayurbhanj    0.903 0.413 0.557 0.621 0.994 0.296
Nabarangapur  0.939 0.477 0.670 0.787 0.998 0.237
Nayagarh      0.968 0.684 0.884 0.961 1.000 0.337
Nuapada       0.935 0.450 0.719 0.870 0.999 0.265
Puri          0.970 0.655 0.851 0.965 1.000 0.422
Rayagada      0.947 0.735 0.804 0.911 0.999 0.239
Sambalpur     0.927 0.684 0.805 0.882 0.998 0.350
Sonapur       0.959 0.525 0.842 0.921 1.000 0.345
Sundargarh    0.936 0.649 0.807 0.889 0.997 0.387
"""


def _parse(block: str) -> dict[str, dict[str, float]]:
    table = {}
    for line in block.strip().splitlines():
        name, *vals = line.split()
        table[name] = dict(zip(INDICATORS, map(float, vals)))
    return table


_TABLES = {2026: _parse(_T2026), 2030: _parse(_T2030)}

DISTRICTS = tuple(_TABLES[2026])


def reference_tables() -> dict[int, dict[str, dict[str, float]]]:
    """``{year: {district: {indicator: value}}}``; a fresh copy on each call."""
    return {y: {d: dict(row) for d, row in t.items()} for y, t in _TABLES.items()}
