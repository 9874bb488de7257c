"""Reserved vocabulary IDs shared by layouts, the engine, and the toy tasks.

The first FIRST_CONTENT_ID ids are never produced by the toy corpus
generators; content tokens start at FIRST_CONTENT_ID.
"""

PAD_ID = 0
EOS_ID = 1       # end of target sequence
EOSEG_ID = 2     # end of target segment (read-n incremental decoding)
ROLE_USER_ID = 3
ROLE_ASST_ID = 4

FIRST_CONTENT_ID = 5


class Tag:
    """Role of a cache/layout entry. Plain string constants so traces and
    golden files stay human-readable."""

    PROMPT = "PROMPT"
    ROLE = "ROLE"
    SOURCE = "SOURCE"
    TARGET = "TARGET"
    PAD = "PAD"

    ALL = (PROMPT, ROLE, SOURCE, TARGET, PAD)
