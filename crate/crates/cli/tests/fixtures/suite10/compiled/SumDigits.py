import sys
from typing import Callable, Any, TypeVar, NamedTuple
from math import floor
from itertools import count

import module_ as module_
import _dafny as _dafny
import System_ as System_

# Module: module_

class default__:
    def  __init__(self):
        pass

    @staticmethod
    def SumDigits(n):
        s: int = int(0)
        s = 0
        d_0_m_: int = n
        while True:
            with _dafny.label():
                if not((d_0_m_) > (0)):
                    break
                s = (s) + (_dafny.euclidian_modulus(d_0_m_, 10))
                d_0_m_ = _dafny.euclidian_division(d_0_m_, 10)
                pass
        return s

