import typing

import orjson

from utils.atomic_io import (
    atomic_write_bytes,
)

_DUMP_OPTIONS = (
    orjson.OPT_INDENT_2
    | orjson.OPT_SORT_KEYS
    | orjson.OPT_SERIALIZE_NUMPY
    | orjson.OPT_APPEND_NEWLINE
)


class JsonUtils:
    __slots__ = ()

    @staticmethod
    def dumps(
        payload: typing.Any,
    ) -> bytes:
        # Sorted keys keep reports byte-identical across runs
        return orjson.dumps(
            payload,
            option=_DUMP_OPTIONS,
        )

    @staticmethod
    def read(
        path: str,
    ) -> typing.Any:
        with open(
            path,
            'rb',
        ) as json_file:
            return orjson.loads(
                json_file.read(),
            )

    @classmethod
    def write(
        cls,
        path: str,
        payload: typing.Any,
    ) -> None:
        atomic_write_bytes(
            path=path,
            content=cls.dumps(
                payload,
            ),
        )
