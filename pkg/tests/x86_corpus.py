"""Hand-assembled 32-bit sequences with their expected decodes.

Each case: (hex bytes, [(offset, length, class, writes, reads, target)]).
``reads`` of None means "not checked". Register ids follow the ModRM
numbering: eax ecx edx ebx esp ebp esi edi = 0..7.
"""
from __future__ import annotations

EAX, ECX, EDX, EBX, ESP, EBP, ESI, EDI = range(8)
N = None

CASES = [
    # stack frame idioms
    ("55", [(0, 1, "push", ESP, {EBP, ESP}, N)]),
    ("8bec", [(0, 2, "mov", EBP, {ESP}, N)]),                      # mov ebp, esp
    ("89e5", [(0, 2, "mov", EBP, {ESP}, N)]),                      # mov ebp, esp (89 form)
    ("5d", [(0, 1, "pop", EBP, {ESP}, N)]),
    ("c3", [(0, 1, "ret", ESP, {ESP}, N)]),
    ("c20800", [(0, 3, "ret", ESP, {ESP}, N)]),                    # ret 8
    ("c9", [(0, 1, "leave", ESP, {EBP}, N)]),
    ("558bec", [(0, 1, "push", ESP, {EBP, ESP}, N), (1, 2, "mov", EBP, {ESP}, N)]),
    ("558becc3", [(0, 1, "push", ESP, N, N), (1, 2, "mov", EBP, N, N), (3, 1, "ret", ESP, N, N)]),
    ("8be55dc3", [(0, 2, "mov", ESP, {EBP}, N), (2, 1, "pop", EBP, {ESP}, N), (3, 1, "ret", ESP, {ESP}, N)]),
    ("53", [(0, 1, "push", ESP, {EBX, ESP}, N)]),
    ("5f", [(0, 1, "pop", EDI, {ESP}, N)]),
    ("57", [(0, 1, "push", ESP, {EDI, ESP}, N)]),
    ("5b", [(0, 1, "pop", EBX, {ESP}, N)]),
    ("6a00", [(0, 2, "push", ESP, {ESP}, N)]),                     # push 0
    ("6800000080", [(0, 5, "push", ESP, {ESP}, N)]),               # push 0x80000000
    # immediates and zeroing
    ("b801000000", [(0, 5, "mov", EAX, set(), N)]),                # mov eax, 1
    ("bb78563412", [(0, 5, "mov", EBX, set(), N)]),
    ("bf00000000", [(0, 5, "mov", EDI, set(), N)]),
    ("31c0", [(0, 2, "xor", EAX, set(), N)]),                      # xor eax, eax
    ("33c9", [(0, 2, "xor", ECX, set(), N)]),                      # xor ecx, ecx
    ("29d2", [(0, 2, "arith", EDX, set(), N)]),                    # sub edx, edx
    ("31d8", [(0, 2, "xor", EAX, {EAX, EBX}, N)]),                 # xor eax, ebx
    # register/memory arithmetic
    ("01d8", [(0, 2, "arith", EAX, {EAX, EBX}, N)]),               # add eax, ebx
    ("034508", [(0, 3, "arith", EAX, {EAX, EBP}, N)]),             # add eax, [ebp+8]
    ("2b4dfc", [(0, 3, "arith", ECX, {ECX, EBP}, N)]),             # sub ecx, [ebp-4]
    ("0bc2", [(0, 2, "arith", EAX, {EAX, EDX}, N)]),               # or eax, edx
    ("23f7", [(0, 2, "arith", ESI, {ESI, EDI}, N)]),               # and esi, edi
    ("0100", [(0, 2, "arith", None, {EAX}, N)]),                   # add [eax], eax
    ("0000", [(0, 2, "arith", None, {EAX}, N)]),                   # add [eax], al
    # moves with every addressing form
    ("8b45fc", [(0, 3, "mov", EAX, {EBP}, N)]),                    # mov eax, [ebp-4]
    ("8945f8", [(0, 3, "mov", None, {EAX, EBP}, N)]),              # mov [ebp-8], eax
    ("8b0424", [(0, 3, "mov", EAX, {ESP}, N)]),                    # mov eax, [esp]
    ("8b442404", [(0, 4, "mov", EAX, {ESP}, N)]),                  # mov eax, [esp+4]
    ("8b048d00100000", [(0, 7, "mov", EAX, {ECX}, N)]),            # mov eax, [ecx*4+0x1000]
    ("8b0500100000", [(0, 6, "mov", EAX, set(), N)]),              # mov eax, [0x1000]
    ("8b8000010000", [(0, 6, "mov", EAX, {EAX}, N)]),              # mov eax, [eax+0x100]
    ("8b842400010000", [(0, 7, "mov", EAX, {ESP}, N)]),            # mov eax, [esp+0x100]
    ("8b4c8b10", [(0, 4, "mov", ECX, {EBX, ECX}, N)]),             # mov ecx, [ebx+ecx*4+0x10]
    ("8bf1", [(0, 2, "mov", ESI, {ECX}, N)]),                      # mov esi, ecx
    ("89c8", [(0, 2, "mov", EAX, {ECX}, N)]),                      # mov eax, ecx
    ("8a45fc", [(0, 3, "mov", EAX, {EBP, EAX}, N)]),               # mov al, [ebp-4]
    ("88c4", [(0, 2, "mov", EAX, {EAX}, N)]),                      # mov ah, al
    # compares
    ("85c0", [(0, 2, "cmp_test", None, {EAX}, N)]),                # test eax, eax
    ("3bc1", [(0, 2, "cmp_test", None, {EAX, ECX}, N)]),           # cmp eax, ecx
    ("39d8", [(0, 2, "cmp_test", None, {EAX, EBX}, N)]),           # cmp eax, ebx
    # control flow
    ("7405", [(0, 2, "jcc", None, N, 7)]),                         # je +5
    ("75fe", [(0, 2, "jcc", None, N, 0)]),                         # jne $
    ("eb0090", [(0, 2, "jmp", None, N, 2), (2, 1, "nop", None, N, N)]),
    ("e900010000", [(0, 5, "jmp", None, N, 0x105)]),
    ("e800000000", [(0, 5, "call", ESP, N, 5)]),                   # call next
    ("e8fbffffff", [(0, 5, "call", ESP, N, 0)]),                   # call self
    ("0f8410000000", [(0, 6, "jcc", None, N, 0x16)]),              # je rel32
    ("0f85faffffff", [(0, 6, "jcc", None, N, 0)]),                 # jne rel32 back to start
    ("ff1500200000", [(0, 6, "call", ESP, {ESP}, N)]),             # call [0x2000]
    ("ffd0", [(0, 2, "call", ESP, {EAX, ESP}, N)]),                # call eax
    ("ffe0", [(0, 2, "jmp", None, {EAX}, N)]),                     # jmp eax
    ("ff2500300000", [(0, 6, "jmp", None, set(), N)]),             # jmp [0x3000]
    # filler and outside the subset
    ("90", [(0, 1, "nop", None, N, N)]),
    ("cc", [(0, 1, "int3", None, N, N)]),
    ("f4", [(0, 1, "unknown", None, N, N)]),                       # hlt
    ("8d45fc", [(0, 1, "unknown", None, N, N), (1, 1, "unknown", None, N, N), (2, 1, "unknown", None, N, N)]),  # lea
    ("6690", [(0, 1, "unknown", None, N, N), (1, 1, "unknown", None, N, N)]),     # operand-size prefix
    ("0f", [(0, 1, "unknown", None, N, N)]),                       # truncated two-byte opcode
    ("8b", [(0, 1, "unknown", None, N, N)]),                       # missing ModRM
    ("b80100", [(0, 1, "unknown", None, N, N), (1, 2, "arith", None, {EAX}, N)]),
    ("3c10", [(0, 1, "unknown", None, N, N), (1, 1, "unknown", None, N, N)]),     # cmp al, imm8
    ("ff30", [(0, 1, "unknown", None, N, N), (1, 1, "unknown", None, N, N)]),     # push [eax]: FF /6 not modelled
]
