from enum import Enum


class EnumString(Enum):
    def __str__(self):
        """
        Makes sure that whenever EnumClass.<enum> is printed or written to a file
        we actually get the plain string and not "EnumClass.<enum>"
        """
        return self.value

    @classmethod
    def parse(cls, text: str):
        """
        Look up a member by its string value (case-insensitive).
        :raises ValueError: if no member carries that value
        """
        for member in cls:
            if member.value.lower() == text.strip().lower():
                return member
        raise ValueError(f"Invalid value '{text}' for {cls.__name__}, valid options are {[m.value for m in cls]}")
