from setuptools import Extension, setup

setup(
    ext_modules=[
        Extension("emlio._crc32c", sources=["src/emlio/_crc32c.c"], optional=True),
    ],
)
