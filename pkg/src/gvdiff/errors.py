"""Error type shared by every module.

Each failure carries a short stable ``code`` (e.g. ``"track-range"``) so that
callers and tests can match on the condition instead of the message text.
"""


class GVDiffError(ValueError):
    def __init__(self, code: str, message: str = ""):
        self.code = code
        self.message = message
        super().__init__(f"{code}: {message}" if message else code)
